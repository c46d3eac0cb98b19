//! Desk-scale training: a linear segmenter over handcrafted features,
//! trained with category-sampled focal + dice losses and the counterfactual
//! cosine term.

mod adam;
pub mod features;
pub mod gradcheck;
pub mod model;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::{Adam, AdamParams};
pub use features::{extract_features, Features, FEATURE_DIM};
pub use model::{ground_truth, loss_and_gradient, Forward, Gradients, LossReport, ModelError, ToyModel, DEFAULT_EMBED_DIM};

use crate::image_io::{self, ImageIoError, RgbImage};
use crate::losses::LossWeights;
use crate::metrics::{self, LabelGrid, MetricError, MetricReport};
use crate::par::{self, Execution};
use crate::sampler::{self, SamplerError, SubsetSize};
use crate::seed;
use crate::types::{CategoryId, Manifest, MaskError, SampleRecord};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training samples")]
    EmptyManifest,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("record {id}: {source}")]
    Image { id: String, source: ImageIoError },
    #[error("record {id}: {source}")]
    Mask { id: String, source: MaskError },
    #[error("record {id}: counterfactual image is {co:?} but image is {image:?}")]
    PairDimensions { id: String, image: (u32, u32), co: (u32, u32) },
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("parameters became non-finite at step {0}")]
    Diverged(usize),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m_subset: SubsetSize,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.0002,
            batch_size: 8,
            steps: 300,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m_subset: SubsetSize::default(),
            embed_dim: DEFAULT_EMBED_DIM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be > 0, got {}", self.lr));
        }
        if self.steps == 0 {
            return bad("train.steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if self.embed_dim == 0 {
            return bad("train.embed_dim must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must be in [0,1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("train.eps must be > 0".into());
        }
        if let SubsetSize::Fixed(0) = self.m_subset {
            return bad("train.m_subset must be >= 1".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

/// A record with its image pair already featurized.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub id: String,
    pub x: Features,
    pub x_co: Features,
    pub known: Vec<CategoryId>,
    pub masks: Vec<(CategoryId, Vec<u8>)>,
}

impl TrainingSample {
    pub fn from_images(record: &SampleRecord, image: &RgbImage, counterfactual: &RgbImage) -> Result<Self, TrainError> {
        if image.dimensions() != counterfactual.dimensions() {
            return Err(TrainError::PairDimensions {
                id: record.id.clone(),
                image: image.dimensions(),
                co: counterfactual.dimensions(),
            });
        }
        let mut masks = Vec::new();
        for m in &record.masks {
            if (m.width, m.height) != image.dimensions() {
                return Err(TrainError::Mask {
                    id: record.id.clone(),
                    source: MaskError::DimensionMismatch {
                        width: image.width(),
                        height: image.height(),
                        expected: (image.width() * image.height()) as usize,
                        actual: m.pixel_count(),
                    },
                });
            }
            let grid = m.decode().map_err(|source| TrainError::Mask { id: record.id.clone(), source })?;
            masks.push((m.category_id, grid));
        }
        Ok(TrainingSample {
            id: record.id.clone(),
            x: extract_features(image),
            x_co: extract_features(counterfactual),
            known: record.categories.clone(),
            masks,
        })
    }

    /// Loads the image pair referenced by `record`, relative to `root`.
    pub fn load(record: &SampleRecord, root: &Path) -> Result<Self, TrainError> {
        let load = |r: &str| image_io::load_png(&root.join(r)).map_err(|source| TrainError::Image { id: record.id.clone(), source });
        let image = load(&record.image_ref)?;
        let co = load(&record.counterfactual_image_ref)?;
        Self::from_images(record, &image, &co)
    }

    pub fn gt_labels(&self) -> LabelGrid {
        let mut grid = LabelGrid::background(self.x.width, self.x.height);
        for (c, mask) in &self.masks {
            for (label, &bit) in grid.labels.iter_mut().zip(mask) {
                if bit == 1 && *label == metrics::BACKGROUND {
                    *label = c.0;
                }
            }
        }
        grid
    }
}

pub fn load_samples(manifest: &Manifest, root: &Path, exec: Execution) -> Result<Vec<TrainingSample>, TrainError> {
    par::map_slice(exec, &manifest.records, |r| TrainingSample::load(r, root)).into_iter().collect()
}

/// One Adam update on a batch. Each image gets its own category subset,
/// drawn from `rng` in batch order; per-image gradients are computed under
/// `exec` and summed in batch order.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut ToyModel,
    adam: &mut Adam,
    batch: &[&TrainingSample],
    m_subset: SubsetSize,
    weights: &LossWeights,
    rng: &mut R,
    exec: Execution,
) -> Result<LossReport, TrainError> {
    let known: Vec<Vec<CategoryId>> = batch.iter().map(|s| s.known.clone()).collect();
    let subsets = sampler::batch_subsets(&known, model.categories(), m_subset, rng)?;
    let frozen: &ToyModel = model;
    let results = par::map_range(exec, batch.len(), |i| {
        let s = batch[i];
        let ids = subsets[i].ids();
        let gt: Array3<f64> = ground_truth(ids, &s.masks, s.x.width, s.x.height);
        loss_and_gradient(frozen, &s.x, &s.x_co, ids, &gt, weights)
    });
    let mut grad = model.zeros_like();
    let mut reports = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len().max(1) as f64;
    for r in results {
        let (report, g) = r?;
        grad.add_scaled(&g, scale);
        reports.push(report);
    }
    adam.step(model, &grad);
    Ok(LossReport::mean(&reports))
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: ToyModel,
    pub history: Vec<LossReport>,
}

/// Trains from scratch. Parameters come from `derive(seed, 0)`; epoch
/// shuffles and category subsets from `derive(seed, 1)`.
pub fn fit(
    samples: &[TrainingSample],
    categories: usize,
    config: &TrainConfig,
    weights: &LossWeights,
    exec: Execution,
) -> Result<FitResult, TrainError> {
    let model = ToyModel::init(categories, config.embed_dim, seed::derive(config.seed, 0));
    fit_from(model, samples, config, weights, exec)
}

/// Continues training an existing model with fresh optimizer state.
pub fn fit_from(
    mut model: ToyModel,
    samples: &[TrainingSample],
    config: &TrainConfig,
    weights: &LossWeights,
    exec: Execution,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    weights.validate().map_err(TrainError::Config)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyManifest);
    }
    let mut adam = Adam::new(&model, config.adam());
    let mut rng = seed::rng(seed::derive(config.seed, 1));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let report = train_step(&mut model, &mut adam, &batch, config.m_subset, weights, &mut rng, exec)?;
        if !model.is_finite() {
            return Err(TrainError::Diverged(step));
        }
        log::debug!("step {step} loss {:.6}", report.total);
        history.push(report);
    }
    Ok(FitResult { model, history })
}

/// Scores every listed category and labels pixels with the background rule.
pub fn predict_labels(
    model: &ToyModel,
    features: &Features,
    categories: &[CategoryId],
    bg_threshold: f64,
) -> Result<LabelGrid, TrainError> {
    let fwd = model.forward(features, categories)?;
    Ok(metrics::assign_labels(&fwd.pred, categories, bg_threshold)?)
}

/// Held-out mIoU over `categories` (usually the whole vocabulary).
pub fn evaluate(
    model: &ToyModel,
    samples: &[TrainingSample],
    categories: &[CategoryId],
    bg_threshold: f64,
    exec: Execution,
) -> Result<MetricReport, TrainError> {
    let preds: Result<Vec<LabelGrid>, TrainError> =
        par::map_slice(exec, samples, |s| predict_labels(model, &s.x, categories, bg_threshold)).into_iter().collect();
    let gts: Vec<LabelGrid> = samples.iter().map(TrainingSample::gt_labels).collect();
    Ok(metrics::miou(&preds?, &gts, categories, exec)?)
}

/// Saved model with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ToyModel,
    pub vocabulary_size: usize,
    pub final_loss: Option<LossReport>,
    /// Effective configuration echo.
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: ToyModel, final_loss: Option<LossReport>, config: serde_json::Value) -> Self {
        Checkpoint { format_version: CHECKPOINT_VERSION, vocabulary_size: model.categories(), model, final_loss, config }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let err = |message: String| TrainError::Checkpoint { path: path.to_path_buf(), message };
        let mut s = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        s.push('\n');
        fs::write(path, s).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |message: String| TrainError::Checkpoint { path: path.to_path_buf(), message };
        let s = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let c: Checkpoint = serde_json::from_str(&s).map_err(|e| err(e.to_string()))?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported format_version {}", c.format_version)));
        }
        if c.model.w.nrows() != FEATURE_DIM || c.model.e.ncols() != c.model.w.ncols() || c.model.b.len() != c.model.e.nrows() {
            return Err(err("inconsistent parameter shapes".into()));
        }
        Ok(c)
    }
}
