//! prompt → text → image pair → detect → segment → validated record.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{self, BackendError, Backends, DetectionBox, Detector, MaskGrid, Segmenter, TextRequest};
use crate::image_io::{self, ImageIoError, RgbImage};
use crate::par::{self, Execution};
use crate::prompt::{self, ConditionSet, PromptError};
use crate::sampler;
use crate::seed;
use crate::types::{
    validate_sample, CategoryId, ClassMask, Manifest, MaskError, Provenance, SampleRecord, Violation, Vocabulary,
    MAX_CATEGORIES,
};

pub const IMAGE_DIR: &str = "images";
pub const RUN_REPORT_FILE: &str = "run-report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub samples_target: usize,
    pub categories_per_sample: usize,
    /// Minimum detector confidence for a box to count.
    pub detection_gate_threshold: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Rejections tolerated before the run fails.
    pub retry_budget: usize,
    /// Attempts dispatched together; results are consumed in attempt order.
    pub wave_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            samples_target: 50,
            categories_per_sample: 1,
            detection_gate_threshold: 0.35,
            seed: 0,
            width: 512,
            height: 512,
            retry_budget: 1000,
            wave_size: 16,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.samples_target == 0 {
            return Err("pipeline.samples_target must be >= 1".into());
        }
        if !(1..=MAX_CATEGORIES).contains(&self.categories_per_sample) {
            return Err(format!("pipeline.categories_per_sample must be 1 or 2, got {}", self.categories_per_sample));
        }
        if !(0.0..=1.0).contains(&self.detection_gate_threshold) {
            return Err(format!(
                "pipeline.detection_gate_threshold must be in [0,1], got {}",
                self.detection_gate_threshold
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err("pipeline.width and pipeline.height must be >= 1".into());
        }
        if self.wave_size == 0 {
            return Err("pipeline.wave_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Why a generated sample was discarded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "category", rename_all = "snake_case")]
pub enum Rejection {
    NotDetected(String),
    CategoryAbsent(String),
    EmptyMask(String),
}

impl Rejection {
    pub fn reason(&self) -> &'static str {
        match self {
            Rejection::NotDetected(_) => "target not detected",
            Rejection::CategoryAbsent(_) => "category absent from text",
            Rejection::EmptyMask(_) => "empty mask",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (Rejection::NotDetected(c) | Rejection::CategoryAbsent(c) | Rejection::EmptyMask(c)) = self;
        write!(f, "{}: {c}", self.reason())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("vocabulary has {vocab} categories, fewer than {per_sample} per sample")]
    VocabularyTooSmall { vocab: usize, per_sample: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("record {id} failed validation: {violations:?}")]
    Invalid { id: String, violations: Vec<String> },
    #[error("retry budget exhausted: {accepted} of {target} accepted after {rejected} rejections")]
    RetryBudgetExhausted { target: usize, accepted: usize, rejected: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Manifest(#[from] crate::types::ManifestError),
}

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("rejected: {0}")]
    Rejected(Rejection),
    #[error(transparent)]
    Failed(#[from] PipelineError),
}

impl From<BackendError> for SampleError {
    fn from(e: BackendError) -> Self {
        SampleError::Failed(e.into())
    }
}

/// An accepted record with its rendered image pair.
#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub record: SampleRecord,
    pub image: RgbImage,
    pub counterfactual: RgbImage,
}

/// Runs detection once for all categories and unions the segmentation of
/// every box at or above `gate` per category. A category with no such box
/// rejects the image.
pub fn label_image(
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    image: &RgbImage,
    categories: &[&str],
    gate: f64,
) -> Result<Result<Vec<MaskGrid>, Rejection>, BackendError> {
    let boxes = detector.detect(image, categories)?;
    let mut masks = Vec::with_capacity(categories.len());
    for &name in categories {
        let hits: Vec<&DetectionBox> = boxes
            .iter()
            .filter(|b| b.category == name && b.confidence >= gate && b.is_valid(image.width(), image.height()))
            .collect();
        if hits.is_empty() {
            return Ok(Err(Rejection::NotDetected(name.to_string())));
        }
        let mut mask = MaskGrid::zeros(image.width(), image.height());
        for b in hits {
            let m = segmenter.segment(image, b)?;
            if (m.width, m.height) != (mask.width, mask.height) {
                return Err(BackendError::DimensionMismatch {
                    endpoint: segmenter.id(),
                    expected: (mask.width, mask.height),
                    actual: (m.width, m.height),
                });
            }
            mask.union_with(&m).expect("dimensions checked");
        }
        if mask.area() == 0 {
            return Ok(Err(Rejection::EmptyMask(name.to_string())));
        }
        masks.push(mask);
    }
    Ok(Ok(masks))
}

pub fn image_refs(id: &str) -> (String, String) {
    (format!("{IMAGE_DIR}/{id}.png"), format!("{IMAGE_DIR}/{id}_co.png"))
}

/// The synthesis stages bound to a vocabulary, backends and configuration.
pub struct Pipeline {
    pub vocabulary: Vocabulary,
    pub config: PipelineConfig,
    pub conditions: ConditionSet,
    pub backends: Backends,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionLog {
    pub attempt: u64,
    pub categories: Vec<CategoryId>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub target: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub attempts: usize,
    pub rejected_by_reason: BTreeMap<String, usize>,
    pub rejections: Vec<RejectionLog>,
    pub seed: u64,
    pub provenance: Provenance,
    /// Effective configuration of the run.
    pub config: serde_json::Value,
}

impl Pipeline {
    pub fn new(vocabulary: Vocabulary, config: PipelineConfig, conditions: ConditionSet, backends: Backends) -> Self {
        Pipeline { vocabulary, config, conditions, backends }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            text_generator: self.backends.text.id(),
            image_generator: self.backends.image.id(),
            detector: self.backends.detector.id(),
            segmenter: self.backends.segmenter.id(),
        }
    }

    /// Category ids and sample seed for attempt `attempt`.
    pub fn attempt_plan(&self, attempt: u64) -> (Vec<CategoryId>, u64) {
        let sample_seed = seed::derive(self.config.seed, attempt);
        let mut rng = seed::rng(seed::derive(sample_seed, 0));
        let k = self.config.categories_per_sample.min(self.vocabulary.len());
        let subset = sampler::sample_categories(&[], self.vocabulary.len(), k, &mut rng).expect("k <= vocabulary size");
        (subset.ids().to_vec(), sample_seed)
    }

    /// One full pass through every stage. Text is generated with
    /// `derive(seed, 1)`; both images with `seed` itself.
    pub fn synthesize_sample(&self, id: &str, categories: &[CategoryId], sample_seed: u64) -> Result<SampleOutput, SampleError> {
        let names: Vec<&str> = categories
            .iter()
            .map(|&c| self.vocabulary.name(c).ok_or(BackendError::InvalidRequest(format!("unknown category {c}"))))
            .collect::<Result<_, _>>()?;
        let instruction = prompt::build_instruction(&names, &self.conditions, 1).map_err(PipelineError::from)?;
        let text = self.backends.text.generate_text(&TextRequest {
            instruction: &instruction,
            categories: &names,
            seed: seed::derive(sample_seed, 1),
        })?;
        if let Some(&missing) = backends::missing_categories(&text, &names).first() {
            return Err(SampleError::Rejected(Rejection::CategoryAbsent(missing.to_string())));
        }
        let counterfactual = prompt::counterfactualize(&text, &names);
        let (w, h) = (self.config.width, self.config.height);
        let (image, co_image) =
            backends::generate_pair(self.backends.image.as_ref(), &text, &counterfactual.text, sample_seed, w, h)?;
        for img in [&image, &co_image] {
            if img.dimensions() != (w, h) {
                return Err(BackendError::DimensionMismatch {
                    endpoint: self.backends.image.id(),
                    expected: (w, h),
                    actual: img.dimensions(),
                }
                .into());
            }
        }
        let grids = match label_image(
            self.backends.detector.as_ref(),
            self.backends.segmenter.as_ref(),
            &image,
            &names,
            self.config.detection_gate_threshold,
        )? {
            Ok(g) => g,
            Err(r) => return Err(SampleError::Rejected(r)),
        };
        let masks = categories
            .iter()
            .zip(&grids)
            .map(|(&c, g)| ClassMask::encode(c, &g.data, w, h))
            .collect::<Result<Vec<_>, _>>()
            .map_err(PipelineError::from)?;
        let (image_ref, counterfactual_image_ref) = image_refs(id);
        let record = SampleRecord {
            id: id.to_string(),
            text,
            counterfactual_text: counterfactual.text,
            categories: categories.to_vec(),
            image_ref,
            counterfactual_image_ref,
            masks,
            seed: sample_seed,
            provenance: self.provenance(),
        };
        let violations = validate_sample(&record, &self.vocabulary, Some((w, h)));
        if !violations.is_empty() {
            return Err(PipelineError::Invalid {
                id: record.id,
                violations: violations.iter().map(Violation::to_string).collect(),
            }
            .into());
        }
        Ok(SampleOutput { record, image, counterfactual: co_image })
    }

    /// Synthesizes until `samples_target` records are accepted. Attempts run
    /// in waves under `exec` and are consumed strictly in attempt order, so
    /// the output depends only on the master seed. `sink` sees every
    /// accepted sample in order; the returned manifest keeps only records.
    pub fn run<F>(&self, exec: Execution, mut sink: F) -> Result<(Manifest, RunReport), PipelineError>
    where
        F: FnMut(&SampleOutput) -> Result<(), PipelineError>,
    {
        self.config.validate().map_err(PipelineError::Config)?;
        if self.vocabulary.is_empty() {
            return Err(PipelineError::EmptyVocabulary);
        }
        if self.vocabulary.len() < self.config.categories_per_sample {
            return Err(PipelineError::VocabularyTooSmall {
                vocab: self.vocabulary.len(),
                per_sample: self.config.categories_per_sample,
            });
        }
        let target = self.config.samples_target;
        let mut records = Vec::with_capacity(target);
        let mut report = RunReport {
            target,
            accepted: 0,
            rejected: 0,
            attempts: 0,
            rejected_by_reason: BTreeMap::new(),
            rejections: Vec::new(),
            seed: self.config.seed,
            provenance: self.provenance(),
            config: serde_json::to_value(&self.config).expect("serializable"),
        };
        let mut next_attempt = 0u64;
        while records.len() < target {
            let wave = self.config.wave_size.min(target - records.len());
            let first = next_attempt;
            let results = par::map_range(exec, wave, |i| {
                let attempt = first + i as u64;
                let (cats, s) = self.attempt_plan(attempt);
                // ids are assigned after ordering; a placeholder keeps refs well-formed
                (attempt, cats.clone(), self.synthesize_sample(&format!("a{attempt}"), &cats, s))
            });
            next_attempt += wave as u64;
            for (attempt, cats, result) in results {
                if records.len() == target {
                    break;
                }
                report.attempts += 1;
                match result {
                    Ok(mut out) => {
                        let id = format!("{:06}", records.len());
                        let (a, b) = image_refs(&id);
                        out.record.id = id;
                        out.record.image_ref = a;
                        out.record.counterfactual_image_ref = b;
                        sink(&out)?;
                        records.push(out.record);
                    }
                    Err(SampleError::Rejected(r)) => {
                        log::info!("attempt {attempt} rejected: {r}");
                        report.rejected += 1;
                        *report.rejected_by_reason.entry(r.reason().to_string()).or_default() += 1;
                        report.rejections.push(RejectionLog { attempt, categories: cats, reason: r.to_string() });
                        if report.rejected > self.config.retry_budget {
                            return Err(PipelineError::RetryBudgetExhausted {
                                target,
                                accepted: records.len(),
                                rejected: report.rejected,
                            });
                        }
                    }
                    Err(SampleError::Failed(e)) => return Err(e),
                }
            }
        }
        report.accepted = records.len();
        Ok((Manifest::new(records), report))
    }

    /// Runs the pipeline and writes images, `manifest.jsonl`,
    /// `vocabulary.json` and `run-report.json` under `out`. `echo` replaces
    /// the pipeline-only config stored in the report.
    pub fn run_to_dir(
        &self,
        out: &Path,
        exec: Execution,
        echo: Option<&serde_json::Value>,
    ) -> Result<(Manifest, RunReport), PipelineError> {
        let images = out.join(IMAGE_DIR);
        fs::create_dir_all(&images).map_err(|source| PipelineError::Io { path: images.clone(), source })?;
        let (manifest, mut report) = self.run(exec, |s| write_images(out, s))?;
        if let Some(v) = echo {
            report.config = v.clone();
        }
        manifest.save(out, &self.vocabulary)?;
        write_json(&out.join(RUN_REPORT_FILE), &report)?;
        Ok((manifest, report))
    }
}

pub fn write_images(root: &Path, sample: &SampleOutput) -> Result<(), PipelineError> {
    image_io::save_png(&sample.image, &root.join(&sample.record.image_ref))?;
    image_io::save_png(&sample.counterfactual, &root.join(&sample.record.counterfactual_image_ref))?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}
