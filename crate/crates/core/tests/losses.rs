use approx::assert_relative_eq;
use magicforge_core::losses::{
    counterfactual_cosine_loss, dice_loss, focal_loss, total_loss, LossWeights, PROB_EPS,
};
use magicforge_core::trainer::gradcheck;
use ndarray::{Array1, Array3, Axis};
use proptest::prelude::*;

fn tensors(max_m: usize, max_side: usize) -> impl Strategy<Value = (Array3<f64>, Array3<f64>)> {
    (1..=max_m, 1..=max_side, 1..=max_side).prop_flat_map(|(m, h, w)| {
        let n = m * h * w;
        (
            prop::collection::vec(0.0f64..1.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(p, y)| {
                (
                    Array3::from_shape_vec((m, h, w), p).unwrap(),
                    Array3::from_shape_vec((m, h, w), y.into_iter().map(|b| f64::from(u8::from(b))).collect()).unwrap(),
                )
            })
    })
}

fn vector(d: usize) -> impl Strategy<Value = Array1<f64>> {
    prop::collection::vec(-2.0f64..2.0, d)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
        .prop_map(Array1::from)
}

fn bce(pred: &Array3<f64>, gt: &Array3<f64>) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / pred.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn value_ranges((pred, gt) in tensors(4, 8), alpha in 0.0f64..4.0) {
        prop_assert!(focal_loss(&pred, &gt, alpha).unwrap().value >= 0.0);
        let d = dice_loss(&pred, &gt).unwrap().value;
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn cosine_range(a in vector(16), b in vector(16)) {
        let c = counterfactual_cosine_loss(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c.value));
        if c.cosine <= 0.0 {
            prop_assert!(c.grad_cls.iter().chain(&c.grad_co).all(|&g| g == 0.0));
        }
    }

    #[test]
    fn alpha_zero_is_bce((pred, gt) in tensors(4, 8)) {
        let f = focal_loss(&pred, &gt, 0.0).unwrap().value;
        prop_assert!((f - bce(&pred, &gt)).abs() <= 1e-9);
    }

    #[test]
    fn plane_permutation_invariance((pred, gt) in tensors(4, 6), a in vector(5), b in vector(5), rot in 0usize..4) {
        let m = pred.len_of(Axis(0));
        let order: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
        let (pp, gp) = (pred.select(Axis(0), &order), gt.select(Axis(0), &order));
        let w = LossWeights::default();
        let x = total_loss(&pred, &gt, &a, &b, &w).unwrap();
        let y = total_loss(&pp, &gp, &a, &b, &w).unwrap();
        prop_assert!((x.focal - y.focal).abs() <= 1e-12 * x.focal.max(1.0));
        prop_assert!((x.dice - y.dice).abs() <= 1e-12);
        prop_assert_eq!(x.cos, y.cos);
    }

    #[test]
    fn linear_in_weights((pred, gt) in tensors(3, 6), a in vector(8), b in vector(8), k in 0.0f64..5.0) {
        let w = LossWeights { w1: 3.0, w2: 0.5, w3: 2.0, alpha: 2.0 };
        let base = total_loss(&pred, &gt, &a, &b, &w).unwrap();
        let scaled = total_loss(&pred, &gt, &a, &b, &w.scaled(k)).unwrap();
        prop_assert!((scaled.total - k * base.total).abs() <= 1e-10 * (1.0 + base.total.abs() * k));
        for (s, g) in scaled.grad_pred.iter().zip(&base.grad_pred) {
            prop_assert!((s - k * g).abs() <= 1e-10 * (1.0 + g.abs() * k));
        }
    }
}

#[test]
fn doubling_weights_doubles_total() {
    let pred = Array3::from_shape_fn((2, 3, 4), |(c, i, j)| 0.1 + 0.07 * (c + i + j) as f64);
    let gt = Array3::from_shape_fn((2, 3, 4), |(c, i, j)| f64::from(u8::from((c * 3 + i + j) % 3 == 0)));
    let (a, b) = (Array1::from(vec![1.0, 0.5, -0.2]), Array1::from(vec![0.3, 0.9, 0.1]));
    let w = LossWeights::default();
    let one = total_loss(&pred, &gt, &a, &b, &w).unwrap().total;
    let two = total_loss(&pred, &gt, &a, &b, &w.scaled(2.0)).unwrap().total;
    assert_relative_eq!(two, 2.0 * one, max_relative = 1e-15);
}

#[test]
fn perfect_prediction_with_orthogonal_tokens_is_near_zero() {
    let gt = Array3::from_shape_fn((2, 4, 4), |(c, i, _)| f64::from(u8::from((c + i) % 2 == 0)));
    let pred = gt.mapv(|y| if y == 1.0 { 1.0 - PROB_EPS } else { PROB_EPS });
    let t = total_loss(&pred, &gt, &Array1::from(vec![1.0, 0.0]), &Array1::from(vec![0.0, 2.0]), &LossWeights::default()).unwrap();
    assert!(t.total.abs() < 1e-5, "{}", t.total);
}

#[test]
fn gradients_match_finite_differences() {
    let r = gradcheck::run(10, 77);
    assert!(r.focal < gradcheck::LOSS_TOLERANCE, "{r:?}");
    assert!(r.dice < gradcheck::LOSS_TOLERANCE, "{r:?}");
    assert!(r.cosine < gradcheck::LOSS_TOLERANCE, "{r:?}");
    assert!(r.end_to_end < gradcheck::END_TO_END_TOLERANCE, "{r:?}");
}
