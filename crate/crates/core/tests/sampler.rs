use std::collections::BTreeSet;

use magicforge_core::sampler::{batch_subsets, sample_categories, SubsetSize};
use magicforge_core::{seed, CategoryId};
use proptest::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

fn known_and_sizes() -> impl Strategy<Value = (Vec<CategoryId>, usize, usize, u64)> {
    (1usize..60).prop_flat_map(|n| {
        (prop::collection::btree_set(0..n as u32, 0..=2.min(n)), Just(n), any::<u64>()).prop_flat_map(
            move |(known, n, s)| {
                let k = known.len();
                (Just(known.into_iter().map(CategoryId).collect::<Vec<_>>()), Just(n), k..=n, Just(s))
            },
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn containment_uniqueness_size((known, n, m, s) in known_and_sizes()) {
        let sub = sample_categories(&known, n, m, &mut seed::rng(s)).unwrap();
        prop_assert_eq!(sub.len(), m);
        prop_assert_eq!(&sub.ids()[..known.len()], &known[..]);
        let set: BTreeSet<_> = sub.ids().iter().collect();
        prop_assert_eq!(set.len(), m);
        prop_assert!(sub.ids().iter().all(|c| c.index() < n));
        prop_assert!(sub.negatives().iter().all(|c| !known.contains(c)));
    }

    #[test]
    fn deterministic((known, n, m, s) in known_and_sizes()) {
        let a = sample_categories(&known, n, m, &mut seed::rng(s)).unwrap();
        let b = sample_categories(&known, n, m, &mut seed::rng(s)).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn negative_frequencies_within_binomial_spread() {
    let (n, m, draws) = (1205usize, 100usize, 10_000usize);
    let known = CategoryId(3);
    let mut rng = seed::rng(2024);
    let mut counts = vec![0u64; n];
    for _ in 0..draws {
        for &c in sample_categories(&[known], n, m, &mut rng).unwrap().negatives() {
            counts[c.index()] += 1;
        }
    }
    assert_eq!(counts[known.index()], 0);
    let p = 99.0 / 1204.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let outside = counts
        .iter()
        .enumerate()
        .filter(|&(i, &c)| i != known.index() && (c as f64 - mean).abs() > 3.0 * sigma)
        .count();
    // 1204 ids each land outside ±3σ with probability ~0.0027, so a few
    // excursions are expected; the count itself must be plausible
    let tail = 1.0 - Binomial::new(0.0027, 1204).unwrap().cdf(outside.saturating_sub(1) as u64);
    assert!(tail > 0.001, "{outside} ids outside 3 sigma (P = {tail})");
}

#[test]
fn batch_subsets_differ_per_image() {
    let batch: Vec<Vec<CategoryId>> = vec![vec![CategoryId(0)]; 8];
    let subsets = batch_subsets(&batch, 1205, SubsetSize::Fixed(100), &mut seed::rng(9)).unwrap();
    let distinct: BTreeSet<Vec<CategoryId>> = subsets
        .iter()
        .map(|s| {
            let mut v = s.negatives().to_vec();
            v.sort();
            v
        })
        .collect();
    assert_eq!(distinct.len(), 8);
}

#[test]
fn m_equal_known_is_known() {
    let s = sample_categories(&[CategoryId(3)], 1205, 1, &mut seed::rng(0)).unwrap();
    assert_eq!(s.ids(), &[CategoryId(3)]);
}
