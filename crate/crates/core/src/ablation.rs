//! Desk-scale ablations: train the toy segmenter on mock scenes under
//! several settings and compare held-out mIoU.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Backends};
use crate::losses::LossWeights;
use crate::par::Execution;
use crate::pipeline::{Pipeline, PipelineConfig, PipelineError};
use crate::prompt::ConditionSet;
use crate::sampler::SubsetSize;
use crate::trainer::{self, TrainConfig, TrainError, TrainingSample};
use crate::types::{CategoryId, Vocabulary};

/// The 12-category vocabulary used by desk runs.
pub const DESK_VOCABULARY: [&str; 12] =
    ["cat", "dog", "car", "tree", "boat", "chair", "bird", "horse", "bottle", "lamp", "apple", "clock"];

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("bad sweep {0:?}: expected m=<list> or w3=<list>")]
    Parse(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub fn desk_vocabulary() -> Vocabulary {
    Vocabulary::new(DESK_VOCABULARY).expect("names are distinct")
}

/// Runs the pipeline in memory and featurizes every accepted sample.
pub fn synthesize_split(
    vocabulary: &Vocabulary,
    config: &PipelineConfig,
    conditions: &ConditionSet,
    backends: Backends,
    exec: Execution,
) -> Result<Vec<TrainingSample>, AblationError> {
    let pipeline = Pipeline::new(vocabulary.clone(), config.clone(), conditions.clone(), backends);
    let mut samples = Vec::with_capacity(config.samples_target);
    let mut failure = None;
    pipeline.run(exec, |s| {
        match TrainingSample::from_images(&s.record, &s.image, &s.counterfactual) {
            Ok(t) => samples.push(t),
            Err(e) => failure = failure.take().or(Some(e)),
        }
        Ok(())
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(samples),
    }
}

/// One axis of an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sweep {
    M(Vec<SubsetSize>),
    W3(Vec<f64>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::M(_) => "m",
            Sweep::W3(_) => "w3",
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            Sweep::M(v) => v.iter().map(ToString::to_string).collect(),
            Sweep::W3(v) => v.iter().map(ToString::to_string).collect(),
        }
    }

    /// Train config and weights for setting `i`.
    fn setting(&self, i: usize, train: &TrainConfig, loss: &LossWeights) -> (TrainConfig, LossWeights) {
        let (mut t, mut l) = (train.clone(), *loss);
        match self {
            Sweep::M(v) => t.m_subset = v[i],
            Sweep::W3(v) => l.w3 = v[i],
        }
        (t, l)
    }

    fn len(&self) -> usize {
        match self {
            Sweep::M(v) => v.len(),
            Sweep::W3(v) => v.len(),
        }
    }
}

impl fmt::Display for Sweep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.name(), self.labels().join(","))
    }
}

impl FromStr for Sweep {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AblationError::Parse(s.to_string());
        let (key, list) = s.split_once('=').ok_or_else(bad)?;
        let items: Vec<&str> = list.split(',').map(str::trim).filter(|x| !x.is_empty()).collect();
        if items.is_empty() {
            return Err(bad());
        }
        match key.trim() {
            "m" => items.iter().map(|x| x.parse().map_err(|_| bad())).collect::<Result<_, _>>().map(Sweep::M),
            "w3" => items
                .iter()
                .map(|x| x.parse::<f64>().ok().filter(|v| *v >= 0.0 && v.is_finite()).ok_or_else(bad))
                .collect::<Result<_, _>>()
                .map(Sweep::W3),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Held-out mIoU at the primary background threshold.
    pub miou: f64,
    /// Held-out mIoU at the reference threshold, if one was requested.
    pub reference_miou: Option<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub runs: Vec<SeedResult>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.runs.iter().map(|r| r.miou).sum::<f64>() / self.runs.len().max(1) as f64
    }

    pub fn miou(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.miou).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sweep: String,
    pub bg_threshold: f64,
    pub reference_threshold: Option<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// Plain-text table, one row per setting.
    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>8}  per-seed mIoU (bg {})", self.sweep_key(), "mean", self.bg_threshold);
        if let Some(t) = self.reference_threshold {
            s += &format!("  [bg {t}]");
        }
        s.push('\n');
        for row in &self.rows {
            let seeds: Vec<String> = row.runs.iter().map(|r| format!("{:.3}", r.miou)).collect();
            s += &format!("{:<10} {:>8.3}  {}", row.setting, row.mean(), seeds.join(" "));
            if self.reference_threshold.is_some() {
                let refs: Vec<String> =
                    row.runs.iter().map(|r| r.reference_miou.map_or("-".into(), |v| format!("{v:.3}"))).collect();
                s += &format!("  [{}]", refs.join(" "));
            }
            s.push('\n');
        }
        s
    }

    fn sweep_key(&self) -> &str {
        self.sweep.split('=').next().unwrap_or("setting")
    }
}

/// Evaluation options for [`run_sweep`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub bg_threshold: f64,
    pub reference_threshold: Option<f64>,
}

/// Trains one model and scores it on `held_out` over every category.
pub fn run_one(
    train: &[TrainingSample],
    held_out: &[TrainingSample],
    categories: usize,
    config: &TrainConfig,
    weights: &LossWeights,
    eval: EvalOptions,
    exec: Execution,
) -> Result<SeedResult, AblationError> {
    let fit = trainer::fit(train, categories, config, weights, exec)?;
    let cats: Vec<CategoryId> = (0..categories as u32).map(CategoryId).collect();
    let miou = trainer::evaluate(&fit.model, held_out, &cats, eval.bg_threshold, exec)?.mean;
    let reference_miou = match eval.reference_threshold {
        Some(t) => Some(trainer::evaluate(&fit.model, held_out, &cats, t, exec)?.mean),
        None => None,
    };
    Ok(SeedResult {
        seed: config.seed,
        miou,
        reference_miou,
        initial_loss: fit.history.first().map_or(f64::NAN, |r| r.total),
        final_loss: fit.history.last().map_or(f64::NAN, |r| r.total),
    })
}

/// Every sweep setting × every seed. `train.seed` is replaced by each entry
/// of `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    sweep: &Sweep,
    seeds: &[u64],
    train: &[TrainingSample],
    held_out: &[TrainingSample],
    categories: usize,
    config: &TrainConfig,
    weights: &LossWeights,
    eval: EvalOptions,
    exec: Execution,
) -> Result<AblationTable, AblationError> {
    let labels = sweep.labels();
    let mut rows = Vec::with_capacity(sweep.len());
    for (i, label) in labels.into_iter().enumerate() {
        let (mut t, l) = sweep.setting(i, config, weights);
        let mut runs = Vec::with_capacity(seeds.len());
        for &s in seeds {
            t.seed = s;
            let r = run_one(train, held_out, categories, &t, &l, eval, exec)?;
            log::info!("{}={label} seed {s}: mIoU {:.4}", sweep.name(), r.miou);
            runs.push(r);
        }
        rows.push(AblationRow { setting: label, runs });
    }
    Ok(AblationTable {
        sweep: sweep.to_string(),
        bg_threshold: eval.bg_threshold,
        reference_threshold: eval.reference_threshold,
        rows,
    })
}

/// Fraction of seeds for which `holds(a_i, b_i, ...)` is true, where each
/// argument row contributes its i-th seed's mIoU.
pub fn seed_agreement(rows: &[&AblationRow], holds: impl Fn(&[f64]) -> bool) -> (usize, usize) {
    let n = rows.iter().map(|r| r.runs.len()).min().unwrap_or(0);
    let hits = (0..n).filter(|&i| holds(&rows.iter().map(|r| r.runs[i].miou).collect::<Vec<_>>())).count();
    (hits, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sweeps() {
        let s: Sweep = "m=1,8,full".parse().unwrap();
        assert_eq!(s, Sweep::M(vec![SubsetSize::Fixed(1), SubsetSize::Fixed(8), SubsetSize::Full]));
        assert_eq!(s.to_string(), "m=1,8,full");
        let w: Sweep = "w3=0, 1".parse().unwrap();
        assert_eq!(w, Sweep::W3(vec![0.0, 1.0]));
        assert_eq!(w.labels(), ["0", "1"]);
        for bad in ["m", "m=", "x=1", "w3=-1", "m=a"] {
            assert!(bad.parse::<Sweep>().is_err(), "{bad}");
        }
    }

    #[test]
    fn agreement_counts_per_seed() {
        let row = |v: &[f64]| AblationRow {
            setting: String::new(),
            runs: v
                .iter()
                .enumerate()
                .map(|(i, &m)| SeedResult { seed: i as u64, miou: m, reference_miou: None, initial_loss: 0.0, final_loss: 0.0 })
                .collect(),
        };
        let a = row(&[0.1, 0.5, 0.9]);
        let b = row(&[0.2, 0.4, 0.95]);
        assert_eq!(seed_agreement(&[&a, &b], |v| v[0] < v[1]), (2, 3));
    }

    #[test]
    fn tiny_sweep_runs() {
        let vocab = Vocabulary::new(["cat", "dog", "car"]).unwrap();
        let pc = PipelineConfig { samples_target: 6, width: 16, height: 16, seed: 4, ..Default::default() };
        let backends = Backends::mock(&vocab, Default::default());
        let data = synthesize_split(&vocab, &pc, &ConditionSet::default(), backends, Execution::Sequential).unwrap();
        assert_eq!(data.len(), 6);
        let cfg = TrainConfig { lr: 0.05, steps: 3, batch_size: 2, ..Default::default() };
        let eval = EvalOptions { bg_threshold: 0.5, reference_threshold: Some(0.95) };
        let table = run_sweep(
            &"m=known,full".parse().unwrap(),
            &[0, 1],
            &data,
            &data,
            3,
            &cfg,
            &LossWeights::default(),
            eval,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.runs.len() == 2 && r.runs.iter().all(|s| (0.0..=1.0).contains(&s.miou))));
        assert!(table.render().contains("known"));
    }
}
