//! Label assignment, dataset-level mIoU and point-sampled mIoU.

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};
use crate::seed;
use crate::types::{CategoryId, ClassMask, MaskError};

/// Label for pixels that belong to no category.
pub const BACKGROUND: u32 = u32::MAX;
pub const DEFAULT_BG_THRESHOLD: f64 = 0.95;
pub const DEFAULT_POINTS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image {index}: prediction is {pred:?} but ground truth is {gt:?}")]
    DimensionMismatch { index: usize, pred: (u32, u32), gt: (u32, u32) },
    #[error("{pred} prediction grids for {gt} ground-truth grids")]
    CountMismatch { pred: usize, gt: usize },
    #[error("points per image must be >= 1")]
    ZeroPoints,
    #[error("score tensor has {planes} planes for {categories} categories")]
    PlaneCount { planes: usize, categories: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Per-pixel labels, row-major. Values are category ids or [`BACKGROUND`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
}

impl LabelGrid {
    pub fn background(width: u32, height: u32) -> Self {
        LabelGrid { width, height, labels: vec![BACKGROUND; (width * height) as usize] }
    }

    /// Paints each mask in order; where masks overlap the earlier one wins.
    pub fn from_masks(width: u32, height: u32, masks: &[ClassMask]) -> Result<Self, MaskError> {
        let mut grid = Self::background(width, height);
        for m in masks {
            if (m.width, m.height) != (width, height) {
                return Err(MaskError::DimensionMismatch {
                    width,
                    height,
                    expected: width as usize * height as usize,
                    actual: m.pixel_count(),
                });
            }
            for (label, v) in grid.labels.iter_mut().zip(m.decode()?) {
                if v == 1 && *label == BACKGROUND {
                    *label = m.category_id.0;
                }
            }
        }
        Ok(grid)
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

/// Labels each pixel with the highest-scoring category when that score
/// reaches `bg_threshold`, otherwise background. Plane `i` of `scores`
/// belongs to `categories[i]`; ties go to the lowest category id.
pub fn assign_labels(
    scores: &Array3<f64>,
    categories: &[CategoryId],
    bg_threshold: f64,
) -> Result<LabelGrid, MetricError> {
    let (planes, h, w) = scores.dim();
    if planes != categories.len() {
        return Err(MetricError::PlaneCount { planes, categories: categories.len() });
    }
    let mut grid = LabelGrid::background(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut best: Option<(f64, CategoryId)> = None;
            for (i, &c) in categories.iter().enumerate() {
                let s = scores[[i, y, x]];
                best = match best {
                    Some((bs, bc)) if bs > s || (bs == s && bc < c) => Some((bs, bc)),
                    _ => Some((s, c)),
                };
            }
            if let Some((s, c)) = best {
                if s >= bg_threshold {
                    grid.labels[y * w + x] = c.0;
                }
            }
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: u64,
    pub predicted: u64,
    pub ground_truth: u64,
}

impl Counts {
    pub fn union(&self) -> u64 {
        self.predicted + self.ground_truth - self.intersection
    }
}

/// Per-label pixel counters, background included. Merging is exact, so
/// per-image accumulation in any order gives the same totals.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    counts: BTreeMap<u32, Counts>,
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, pred: u32, gt: u32) {
        if pred == gt {
            let c = self.counts.entry(pred).or_default();
            c.intersection += 1;
            c.predicted += 1;
            c.ground_truth += 1;
        } else {
            self.counts.entry(pred).or_default().predicted += 1;
            self.counts.entry(gt).or_default().ground_truth += 1;
        }
    }

    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<(), MetricError> {
        if pred.dims() != gt.dims() {
            return Err(MetricError::DimensionMismatch { index: 0, pred: pred.dims(), gt: gt.dims() });
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            self.record(p, g);
        }
        Ok(())
    }

    /// Counts only the listed pixel indices.
    pub fn add_points(&mut self, pred: &LabelGrid, gt: &LabelGrid, points: &[usize]) {
        for &k in points {
            self.record(pred.labels[k], gt.labels[k]);
        }
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) {
        for (&label, c) in &other.counts {
            let e = self.counts.entry(label).or_default();
            e.intersection += c.intersection;
            e.predicted += c.predicted;
            e.ground_truth += c.ground_truth;
        }
    }

    pub fn counts(&self, label: u32) -> Counts {
        self.counts.get(&label).copied().unwrap_or_default()
    }

    /// IoU per category with a non-empty union, and their mean. Background
    /// never enters the mean.
    pub fn report(&self, categories: &[CategoryId], mode: Mode, points_per_image: Option<usize>) -> MetricReport {
        let mut per_category = Vec::new();
        for &c in categories {
            let k = self.counts(c.0);
            let union = k.union();
            if union == 0 {
                continue;
            }
            per_category.push(CategoryIou {
                category: c,
                iou: k.intersection as f64 / union as f64,
                intersection: k.intersection,
                union,
            });
        }
        let mean = if per_category.is_empty() {
            0.0
        } else {
            per_category.iter().map(|c| c.iou).sum::<f64>() / per_category.len() as f64
        };
        MetricReport {
            mode,
            mean,
            per_category,
            background_in_mean: false,
            points_per_image,
            skipped_images: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Miou,
    Pmiou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryIou {
    pub category: CategoryId,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub mean: f64,
    pub per_category: Vec<CategoryIou>,
    pub background_in_mean: bool,
    pub points_per_image: Option<usize>,
    pub skipped_images: usize,
}

impl MetricReport {
    pub fn iou(&self, c: CategoryId) -> Option<f64> {
        self.per_category.iter().find(|e| e.category == c).map(|e| e.iou)
    }
}

fn check_pairs(preds: &[LabelGrid], gts: &[LabelGrid]) -> Result<(), MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::CountMismatch { pred: preds.len(), gt: gts.len() });
    }
    for (index, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.dims() != g.dims() {
            return Err(MetricError::DimensionMismatch { index, pred: p.dims(), gt: g.dims() });
        }
    }
    Ok(())
}

fn reduce(parts: Vec<ConfusionAccumulator>) -> ConfusionAccumulator {
    parts.iter().fold(ConfusionAccumulator::new(), |mut acc, p| {
        acc.merge(p);
        acc
    })
}

/// Dataset-level mIoU: counters accumulate over all images before dividing.
pub fn miou(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    categories: &[CategoryId],
    exec: Execution,
) -> Result<MetricReport, MetricError> {
    check_pairs(preds, gts)?;
    let parts = par::map_range(exec, preds.len(), |i| {
        let mut acc = ConfusionAccumulator::new();
        acc.add(&preds[i], &gts[i]).expect("dimensions checked");
        acc
    });
    Ok(reduce(parts).report(categories, Mode::Miou, None))
}

/// Splits a budget of `k` points over strata of the given sizes: every
/// stratum gets an equal share rounded up, capped at its size, and points a
/// capped stratum cannot use are shared among the others. When `k` covers
/// every pixel each stratum is taken whole.
pub fn stratum_quotas(sizes: &[usize], k: usize) -> Vec<usize> {
    let mut quota = vec![0; sizes.len()];
    let mut open: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] > 0).collect();
    let mut budget = k;
    while !open.is_empty() && budget > 0 {
        let share = budget.div_ceil(open.len());
        let mut spent = 0;
        let mut still_open = Vec::new();
        for &i in &open {
            let take = share.min(sizes[i] - quota[i]);
            quota[i] += take;
            spent += take;
            if quota[i] < sizes[i] {
                still_open.push(i);
            }
        }
        // every open stratum received a full share: allocation is done
        if still_open.len() == open.len() {
            break;
        }
        budget = budget.saturating_sub(spent);
        open = still_open;
    }
    quota
}

/// Pixel indices sampled for one image: strata are the ground-truth labels
/// (background included), each sampled uniformly without replacement.
pub fn sample_points(gt: &LabelGrid, k: usize, seed_value: u64) -> Vec<usize> {
    let mut strata: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in gt.labels.iter().enumerate() {
        strata.entry(l).or_default().push(i);
    }
    let sizes: Vec<usize> = strata.values().map(Vec::len).collect();
    let quotas = stratum_quotas(&sizes, k);
    let mut rng = seed::rng(seed_value);
    let mut points = Vec::new();
    for (pixels, q) in strata.values().zip(quotas) {
        if q == pixels.len() {
            points.extend_from_slice(pixels);
        } else {
            points.extend(index::sample(&mut rng, pixels.len(), q).into_iter().map(|j| pixels[j]));
        }
    }
    points
}

/// mIoU over `k` stratified sample points per image. Image `i` draws its
/// points from `derive(seed, i)`, so the result does not depend on `exec`.
pub fn p_miou(
    preds: &[LabelGrid],
    gts: &[LabelGrid],
    categories: &[CategoryId],
    k: usize,
    seed_value: u64,
    exec: Execution,
) -> Result<MetricReport, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroPoints);
    }
    check_pairs(preds, gts)?;
    let parts = par::map_range(exec, preds.len(), |i| {
        let mut acc = ConfusionAccumulator::new();
        if gts[i].labels.is_empty() {
            return (acc, true);
        }
        let points = sample_points(&gts[i], k, seed::derive(seed_value, i as u64));
        acc.add_points(&preds[i], &gts[i], &points);
        (acc, false)
    });
    let skipped = parts.iter().filter(|p| p.1).count();
    if skipped > 0 {
        log::warn!("p-mIoU skipped {skipped} images with no annotated pixels");
    }
    let mut report = reduce(parts.into_iter().map(|p| p.0).collect()).report(categories, Mode::Pmiou, Some(k));
    report.skipped_images = skipped;
    Ok(report)
}
