//! Central finite-difference checks of every analytic gradient.

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::extract_features;
use super::model::{loss_and_gradient, ToyModel};
use crate::image_io::RgbImage;
use crate::losses::{self, LossWeights};
use crate::seed;
use crate::types::CategoryId;

pub const STEP: f64 = 1e-5;
pub const LOSS_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;
/// Cosine cases this close to the hinge are skipped.
const HINGE_MARGIN: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

fn central<F: FnMut(f64) -> f64>(x: f64, mut f: F) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

fn random_pred(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.random_range(0.05..0.95))
}

fn random_gt(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn random_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=8))
}

fn check_tensor<F>(pred: &Array3<f64>, analytic: &Array3<f64>, mut loss: F) -> f64
where
    F: FnMut(&Array3<f64>) -> f64,
{
    let mut worst = 0.0f64;
    let mut probe = pred.clone();
    for (idx, &a) in analytic.indexed_iter() {
        let x = probe[idx];
        let n = central(x, |v| {
            probe[idx] = v;
            loss(&probe)
        });
        probe[idx] = x;
        worst = worst.max(relative_error(a, n));
    }
    worst
}

/// Max relative error of the focal gradient on one random case.
pub fn focal_case(seed_value: u64) -> f64 {
    let mut rng = seed::rng(seed_value);
    let shape = random_shape(&mut rng);
    let (pred, gt) = (random_pred(&mut rng, shape), random_gt(&mut rng, shape));
    let alpha = rng.random_range(0.0..3.0);
    let g = losses::focal_loss(&pred, &gt, alpha).expect("valid case").grad;
    check_tensor(&pred, &g, |p| losses::focal_loss(p, &gt, alpha).unwrap().value)
}

pub fn dice_case(seed_value: u64) -> f64 {
    let mut rng = seed::rng(seed_value);
    let shape = random_shape(&mut rng);
    let (pred, gt) = (random_pred(&mut rng, shape), random_gt(&mut rng, shape));
    let g = losses::dice_loss(&pred, &gt).expect("valid case").grad;
    check_tensor(&pred, &g, |p| losses::dice_loss(p, &gt).unwrap().value)
}

/// Redraws until the cosine is clear of the hinge; returns `None` only if
/// that never happens.
pub fn cosine_case(seed_value: u64) -> Option<f64> {
    let mut rng = seed::rng(seed_value);
    for _ in 0..100 {
        let d = rng.random_range(2..=16);
        let a = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0));
        let Ok(l) = losses::counterfactual_cosine_loss(&a, &b) else { continue };
        if l.cosine.abs() < HINGE_MARGIN {
            continue;
        }
        let value = |a: &Array1<f64>, b: &Array1<f64>| losses::counterfactual_cosine_loss(a, b).unwrap().value;
        let mut worst = 0.0f64;
        let mut pa = a.clone();
        for i in 0..d {
            let x = pa[i];
            let n = central(x, |v| {
                pa[i] = v;
                value(&pa, &b)
            });
            pa[i] = x;
            worst = worst.max(relative_error(l.grad_cls[i], n));
        }
        let mut pb = b.clone();
        for i in 0..d {
            let x = pb[i];
            let n = central(x, |v| {
                pb[i] = v;
                value(&a, &pb)
            });
            pb[i] = x;
            worst = worst.max(relative_error(l.grad_co[i], n));
        }
        return Some(worst);
    }
    None
}

fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Gradient of the full composition (features → linear scorer → sigmoid →
/// weighted losses) with respect to W, E and b.
pub fn end_to_end_case(seed_value: u64) -> f64 {
    let mut rng = seed::rng(seed_value);
    let n = 6;
    let d = rng.random_range(2..=16);
    let (w, h) = (rng.random_range(3..=8), rng.random_range(3..=8));
    let x = extract_features(&random_image(&mut rng, w, h));
    let x_co = extract_features(&random_image(&mut rng, w, h));
    let mut model = ToyModel::init(n, d, rng.random());
    for b in model.b.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let m = rng.random_range(1..=4);
    let mut ids: Vec<CategoryId> = (0..n).map(CategoryId::from).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        ids.swap(i, j);
    }
    ids.truncate(m);
    let mut gt = random_gt(&mut rng, (m, h as usize, w as usize));
    for plane in 1..m {
        if rng.random_bool(0.5) {
            gt.index_axis_mut(ndarray::Axis(0), plane).fill(0.0);
        }
    }
    let weights = LossWeights::default();
    let loss = |model: &ToyModel| loss_and_gradient(model, &x, &x_co, &ids, &gt, &weights).map(|r| r.0.total);
    let Ok((_, grad)) = loss_and_gradient(&model, &x, &x_co, &ids, &gt, &weights) else {
        return f64::INFINITY;
    };
    let analytic: Vec<f64> = grad.params().collect();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let x0 = model.params().nth(i).expect("index in range");
        let numeric = central(x0, |v| {
            *model.params_mut().nth(i).expect("index in range") = v;
            loss(&model).unwrap_or(f64::NAN)
        });
        *model.params_mut().nth(i).expect("index in range") = x0;
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seeds: usize,
    pub focal: f64,
    pub dice: f64,
    pub cosine: f64,
    pub end_to_end: f64,
}

impl GradcheckReport {
    pub fn losses_pass(&self) -> bool {
        self.focal < LOSS_TOLERANCE && self.dice < LOSS_TOLERANCE && self.cosine < LOSS_TOLERANCE
    }

    pub fn passes(&self) -> bool {
        self.losses_pass() && self.end_to_end < END_TO_END_TOLERANCE
    }
}

/// Runs every suite on `seeds` random cases derived from `base_seed`.
pub fn run(seeds: usize, base_seed: u64) -> GradcheckReport {
    let mut r = GradcheckReport { seeds, focal: 0.0, dice: 0.0, cosine: 0.0, end_to_end: 0.0 };
    for i in 0..seeds as u64 {
        let s = seed::derive(base_seed, i);
        r.focal = r.focal.max(focal_case(seed::derive(s, 0)));
        r.dice = r.dice.max(dice_case(seed::derive(s, 1)));
        r.cosine = r.cosine.max(cosine_case(seed::derive(s, 2)).unwrap_or(f64::INFINITY));
        r.end_to_end = r.end_to_end.max(end_to_end_case(seed::derive(s, 3)));
    }
    r
}
