//! Mask and counterfactual losses with analytic gradients.
//!
//! All mask losses take post-sigmoid probabilities `pred` and binary
//! ground truth `gt`, both shaped `m × H × W` (one plane per category in the
//! sampled subset). Gradients are with respect to `pred`; callers chain
//! through the sigmoid themselves.
//!
//! Plane sums are accumulated in a fixed order, so results are reproducible;
//! the gradient-check tolerances cover any reassociation a caller introduces
//! by summing planes in parallel.

use ndarray::{Array1, Array3, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// `m × H × W` probabilities in (0, 1).
pub type PredictionTensor = Array3<f64>;
/// `m × H × W` binary targets; all-zero planes for sampled negatives.
pub type GroundTruthTensor = Array3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction shape {pred:?} does not match ground truth shape {gt:?}")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("ground truth value {0} is not binary")]
    NonBinary(f64),
    #[error("class token vectors have lengths {0} and {1}")]
    TokenLength(usize, usize),
    #[error("class token has zero norm")]
    ZeroNorm,
    #[error("empty tensor")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Focal weight.
    pub w1: f64,
    /// Dice weight.
    pub w2: f64,
    /// Counterfactual cosine weight.
    pub w3: f64,
    /// Focal exponent balancing easy and hard pixels.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: 100.0, w2: 1.0, w3: 1.0, alpha: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("w1", self.w1), ("w2", self.w2), ("w3", self.w3), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("loss.{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        LossWeights { w1: self.w1 * k, w2: self.w2 * k, w3: self.w3 * k, alpha: self.alpha }
    }
}

/// Scalar loss with its gradient with respect to the prediction tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Array3<f64>,
}

/// `x^a`, exact and fast for the usual integer exponents.
fn pow(x: f64, a: f64) -> f64 {
    if a == 2.0 {
        x * x
    } else if a.fract() == 0.0 && a.abs() < 64.0 {
        x.powi(a as i32)
    } else {
        x.powf(a)
    }
}

fn check(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<(), LossError> {
    if pred.shape() != gt.shape() {
        return Err(LossError::ShapeMismatch { pred: pred.shape().to_vec(), gt: gt.shape().to_vec() });
    }
    if pred.is_empty() {
        return Err(LossError::Empty);
    }
    if let Some(&bad) = gt.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(LossError::NonBinary(bad));
    }
    Ok(())
}

/// Focal-weighted binary cross-entropy averaged over all `m·H·W` elements:
/// `-(1/mHW) Σ [(1-p)^α y ln p + p^α (1-y) ln(1-p)]`.
pub fn focal_loss(pred: &PredictionTensor, gt: &GroundTruthTensor, alpha: f64) -> Result<LossValue, LossError> {
    check(pred, gt)?;
    let scale = 1.0 / pred.len() as f64;
    let mut grad = Array3::<f64>::zeros(pred.raw_dim());
    let mut total = 0.0;
    Zip::from(&mut grad).and(pred).and(gt).for_each(|g, &raw, &y| {
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let inside = raw > PROB_EPS && raw < 1.0 - PROB_EPS;
        let (value, d) = if y == 1.0 {
            let q = 1.0 - p;
            let v = pow(q, alpha) * p.ln();
            // d/dp [(1-p)^α ln p]
            let dv = -alpha * pow(q, alpha - 1.0) * p.ln() + pow(q, alpha) / p;
            (v, dv)
        } else {
            let q = 1.0 - p;
            let v = pow(p, alpha) * q.ln();
            // d/dp [p^α ln(1-p)]
            let dv = alpha * pow(p, alpha - 1.0) * q.ln() - pow(p, alpha) / q;
            (v, dv)
        };
        total -= value;
        *g = if inside { -d * scale } else { 0.0 };
    });
    Ok(LossValue { value: total * scale, grad })
}

/// Mean over planes of `1 - 2Σpy / (Σp² + Σy²)`. Planes whose denominator
/// is zero contribute nothing.
pub fn dice_loss(pred: &PredictionTensor, gt: &GroundTruthTensor) -> Result<LossValue, LossError> {
    check(pred, gt)?;
    let m = pred.shape()[0];
    let mut grad = Array3::<f64>::zeros(pred.raw_dim());
    let mut total = 0.0;
    for ((p, y), mut g) in pred.outer_iter().zip(gt.outer_iter()).zip(grad.outer_iter_mut()) {
        let inter: f64 = Zip::from(&p).and(&y).fold(0.0, |acc, &a, &b| acc + a * b);
        let denom: f64 = Zip::from(&p).and(&y).fold(0.0, |acc, &a, &b| acc + a * a + b * b);
        if denom == 0.0 {
            continue;
        }
        let coeff = 2.0 * inter / denom;
        total += 1.0 - coeff;
        // d coeff / dp_k = 2 y_k / D - 4 I p_k / D²
        Zip::from(&mut g).and(&p).and(&y).for_each(|gk, &pk, &yk| {
            let dc = 2.0 * yk / denom - 4.0 * inter * pk / (denom * denom);
            *gk = -dc / m as f64;
        });
    }
    Ok(LossValue { value: total / m as f64, grad })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineLoss {
    pub value: f64,
    pub cosine: f64,
    pub grad_cls: Array1<f64>,
    pub grad_co: Array1<f64>,
}

/// `max(0, cos(p_cls, p_co))`; the gradient is zero whenever the cosine is
/// not positive.
pub fn counterfactual_cosine_loss(p_cls: &Array1<f64>, p_co: &Array1<f64>) -> Result<CosineLoss, LossError> {
    if p_cls.len() != p_co.len() {
        return Err(LossError::TokenLength(p_cls.len(), p_co.len()));
    }
    let na = p_cls.dot(p_cls).sqrt();
    let nb = p_co.dot(p_co).sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(LossError::ZeroNorm);
    }
    let cosine = p_cls.dot(p_co) / (na * nb);
    if cosine <= 0.0 {
        return Ok(CosineLoss {
            value: 0.0,
            cosine,
            grad_cls: Array1::zeros(p_cls.len()),
            grad_co: Array1::zeros(p_co.len()),
        });
    }
    // ∂cos/∂a = b/(|a||b|) - cos·a/|a|²
    let grad_cls = p_co / (na * nb) - p_cls * (cosine / (na * na));
    let grad_co = p_cls / (na * nb) - p_co * (cosine / (nb * nb));
    Ok(CosineLoss { value: cosine, cosine, grad_cls, grad_co })
}

/// Weighted sum of the three losses with all gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub focal: f64,
    pub dice: f64,
    pub cos: f64,
    pub total: f64,
    pub grad_pred: Array3<f64>,
    pub grad_cls: Array1<f64>,
    pub grad_co: Array1<f64>,
}

pub fn total_loss(
    pred: &PredictionTensor,
    gt: &GroundTruthTensor,
    p_cls: &Array1<f64>,
    p_co: &Array1<f64>,
    weights: &LossWeights,
) -> Result<TotalLoss, LossError> {
    let focal = focal_loss(pred, gt, weights.alpha)?;
    let dice = dice_loss(pred, gt)?;
    let cos = counterfactual_cosine_loss(p_cls, p_co)?;
    let total = weights.w1 * focal.value + weights.w2 * dice.value + weights.w3 * cos.value;
    let grad_pred = focal.grad * weights.w1 + dice.grad * weights.w2;
    Ok(TotalLoss {
        focal: focal.value,
        dice: dice.value,
        cos: cos.value,
        total,
        grad_pred,
        grad_cls: cos.grad_cls * weights.w3,
        grad_co: cos.grad_co * weights.w3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, Array3};

    fn t(m: usize, h: usize, w: usize, v: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((m, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn focal_single_pixel() {
        let l = focal_loss(&t(1, 1, 1, &[0.5]), &t(1, 1, 1, &[1.0]), 2.0).unwrap();
        // -(0.5)^2 ln 0.5
        assert_abs_diff_eq!(l.value, 0.173287, epsilon = 1e-6);
    }

    #[test]
    fn focal_perfect_prediction_is_near_zero() {
        let gt = t(1, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = focal_loss(&gt, &gt, 2.0).unwrap();
        assert!(l.value.abs() < 1e-5);
        assert!(l.value >= 0.0);
    }

    #[test]
    fn dice_trivial_cases() {
        let gt = t(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dice_loss(&gt, &gt).unwrap().value, 0.0);
        let l = dice_loss(&t(1, 1, 2, &[1.0, 1.0]), &t(1, 1, 2, &[0.0, 0.0])).unwrap();
        assert_eq!(l.value, 1.0);
        let zero = t(1, 1, 2, &[0.0, 0.0]);
        let l = dice_loss(&zero, &zero).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cosine_trivial_cases() {
        let a = arr1(&[0.6, 0.8]);
        let same = counterfactual_cosine_loss(&a, &a).unwrap();
        assert_abs_diff_eq!(same.value, 1.0, epsilon = 1e-15);
        assert!(same.grad_cls.iter().chain(same.grad_co.iter()).all(|g| g.abs() < 1e-15));
        let orth = counterfactual_cosine_loss(&arr1(&[1.0, 0.0]), &arr1(&[0.0, 2.0])).unwrap();
        assert_eq!(orth.value, 0.0);
        assert!(orth.grad_cls.iter().all(|&g| g == 0.0));
        let anti = counterfactual_cosine_loss(&a, &(-&a)).unwrap();
        assert_eq!(anti.value, 0.0);
        assert!(anti.grad_co.iter().all(|&g| g == 0.0));
        assert_eq!(
            counterfactual_cosine_loss(&arr1(&[0.0, 0.0]), &a),
            Err(LossError::ZeroNorm)
        );
        assert_eq!(counterfactual_cosine_loss(&arr1(&[1.0]), &a), Err(LossError::TokenLength(1, 2)));
    }

    #[test]
    fn input_errors() {
        let a = t(1, 1, 2, &[0.5, 0.5]);
        let b = t(1, 2, 1, &[0.0, 1.0]);
        assert!(matches!(focal_loss(&a, &b, 2.0), Err(LossError::ShapeMismatch { .. })));
        assert_eq!(focal_loss(&a, &t(1, 1, 2, &[0.0, 0.5]), 2.0), Err(LossError::NonBinary(0.5)));
        assert!(matches!(dice_loss(&a, &b), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_weights_and_vanishing_components() {
        let gt = t(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pred = t(2, 1, 2, &[0.3, 0.6, 0.2, 0.9]);
        let zero = LossWeights { w1: 0.0, w2: 0.0, w3: 0.0, alpha: 2.0 };
        let l = total_loss(&pred, &gt, &arr1(&[1.0, 2.0]), &arr1(&[2.0, 1.0]), &zero).unwrap();
        assert_eq!(l.total, 0.0);
        let l = total_loss(&gt, &gt, &arr1(&[1.0, 0.0]), &arr1(&[0.0, 1.0]), &LossWeights::default()).unwrap();
        assert!(l.total.abs() < 1e-3, "{}", l.total);
    }
}
