//! Linear per-pixel scorer: `ŷ_{c,k} = σ(E_c · (Wᵀ φ_k) + b_c)`, class token
//! `p = Wᵀ mean_k φ_k`.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::{Features, FEATURE_DIM};
use crate::losses::{self, LossError, LossWeights};
use crate::seed;
use crate::types::CategoryId;

pub const DEFAULT_EMBED_DIM: usize = 16;
const INIT_RANGE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("category {0} is outside the model's {1} categories")]
    CategoryOutOfRange(CategoryId, usize),
    #[error("feature width {0} does not match the model's {1}")]
    FeatureDim(usize, usize),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    /// `d_f × d` feature projection.
    pub w: Array2<f64>,
    /// `N × d` category embeddings.
    pub e: Array2<f64>,
    /// Per-category bias.
    pub b: Array1<f64>,
}

/// Same shapes as the model; used for gradients and optimizer moments.
pub type Gradients = ToyModel;

pub struct Forward {
    /// `m × H × W` probabilities.
    pub pred: Array3<f64>,
    /// Class token, length `d`.
    pub token: Array1<f64>,
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

impl ToyModel {
    /// `W, E ~ U(-0.1, 0.1)` from `seed`, `b = 0`.
    pub fn init(categories: usize, dim: usize, seed_value: u64) -> Self {
        let mut rng = seed::rng(seed_value);
        let mut draw = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || rng.random_range(-INIT_RANGE..INIT_RANGE))
        };
        let w = draw((FEATURE_DIM, dim));
        let e = draw((categories, dim));
        ToyModel { w, e, b: Array1::zeros(categories) }
    }

    pub fn zeros_like(&self) -> Self {
        ToyModel {
            w: Array2::zeros(self.w.raw_dim()),
            e: Array2::zeros(self.e.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn categories(&self) -> usize {
        self.e.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.w.len() + self.e.len() + self.b.len()
    }

    /// Parameters flattened as W, E, b (row-major).
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.w.iter().chain(self.e.iter()).chain(self.b.iter()).copied()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.w.iter_mut().chain(self.e.iter_mut()).chain(self.b.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    pub fn add_scaled(&mut self, other: &ToyModel, k: f64) {
        self.w.scaled_add(k, &other.w);
        self.e.scaled_add(k, &other.e);
        self.b.scaled_add(k, &other.b);
    }

    fn check(&self, features: &Features, categories: &[CategoryId]) -> Result<(), ModelError> {
        if features.pixels.ncols() != self.w.nrows() {
            return Err(ModelError::FeatureDim(features.pixels.ncols(), self.w.nrows()));
        }
        match categories.iter().find(|c| c.index() >= self.categories()) {
            Some(&c) => Err(ModelError::CategoryOutOfRange(c, self.categories())),
            None => Ok(()),
        }
    }

    /// `v_c = W E_c` for each category, as a `d_f × m` matrix.
    fn projections(&self, categories: &[CategoryId]) -> Array2<f64> {
        let idx: Vec<usize> = categories.iter().map(|c| c.index()).collect();
        self.w.dot(&self.e.select(Axis(0), &idx).t())
    }

    pub fn class_token(&self, features: &Features) -> Array1<f64> {
        self.w.t().dot(&features.pooled)
    }

    /// Raw scores `s`, `m × HW`.
    fn scores(&self, features: &Features, categories: &[CategoryId]) -> Array2<f64> {
        let mut s = self.projections(categories).t().dot(&features.pixels.t());
        for (mut row, c) in s.outer_iter_mut().zip(categories) {
            row += self.b[c.index()];
        }
        s.as_standard_layout().into_owned()
    }

    pub fn forward(&self, features: &Features, categories: &[CategoryId]) -> Result<Forward, ModelError> {
        self.check(features, categories)?;
        let (h, w) = (features.height as usize, features.width as usize);
        let pred = self
            .scores(features, categories)
            .mapv(sigmoid)
            .into_shape_with_order((categories.len(), h, w))
            .expect("m × HW scores");
        Ok(Forward { pred, token: self.class_token(features) })
    }
}

/// Loss components for one image pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub focal: f64,
    pub dice: f64,
    pub cos: f64,
    pub total: f64,
}

impl LossReport {
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut out = LossReport::default();
        for r in reports {
            out.focal += r.focal / n;
            out.dice += r.dice / n;
            out.cos += r.cos / n;
            out.total += r.total / n;
        }
        out
    }
}

/// Total loss of one sample and its gradient with respect to every model
/// parameter. `gt` has one plane per entry of `categories`.
pub fn loss_and_gradient(
    model: &ToyModel,
    x: &Features,
    x_co: &Features,
    categories: &[CategoryId],
    gt: &Array3<f64>,
    weights: &LossWeights,
) -> Result<(LossReport, Gradients), ModelError> {
    model.check(x, categories)?;
    let fwd = model.forward(x, categories)?;
    let token_co = model.class_token(x_co);
    let loss = losses::total_loss(&fwd.pred, gt, &fwd.token, &token_co, weights)?;

    let m = categories.len();
    let hw = x.len();
    // chain through the sigmoid: ∂s = ∂ŷ · ŷ(1 - ŷ)
    let pred = fwd.pred.into_shape_with_order((m, hw)).expect("m × HW");
    let grad_pred = loss.grad_pred.into_shape_with_order((m, hw)).expect("m × HW");
    let gs = &grad_pred * &pred.mapv(|p| p * (1.0 - p));

    // u_c = Σ_k ∂s_{c,k} φ_k
    let u = gs.dot(&x.pixels);
    let idx: Vec<usize> = categories.iter().map(|c| c.index()).collect();
    let e_sub = model.e.select(Axis(0), &idx);

    let mut grad = model.zeros_like();
    grad.w = u.t().dot(&e_sub);
    let ge = u.dot(&model.w);
    let gb = gs.sum_axis(Axis(1));
    for (j, &c) in idx.iter().enumerate() {
        let mut row = grad.e.row_mut(c);
        row += &ge.row(j);
        grad.b[c] += gb[j];
    }
    // class tokens: ∂W += μ ∂pᵀ
    let outer = |mu: &Array1<f64>, gp: &Array1<f64>| {
        mu.view().insert_axis(Axis(1)).dot(&gp.view().insert_axis(Axis(0)))
    };
    grad.w += &outer(&x.pooled, &loss.grad_cls);
    grad.w += &outer(&x_co.pooled, &loss.grad_co);

    let report = LossReport { focal: loss.focal, dice: loss.dice, cos: loss.cos, total: loss.total };
    Ok((report, grad))
}

/// Ground-truth tensor aligned with `categories`: known categories take
/// their mask, every other plane is all zero.
pub fn ground_truth(
    categories: &[CategoryId],
    masks: &[(CategoryId, Vec<u8>)],
    width: u32,
    height: u32,
) -> Array3<f64> {
    let (h, w) = (height as usize, width as usize);
    let mut gt = Array3::<f64>::zeros((categories.len(), h, w));
    for (i, c) in categories.iter().enumerate() {
        if let Some((_, mask)) = masks.iter().find(|(id, _)| id == c) {
            let mut plane = gt.slice_mut(s![i, .., ..]);
            for (v, &bit) in plane.iter_mut().zip(mask) {
                *v = f64::from(bit);
            }
        }
    }
    gt
}
