use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ClassMask, CategoryId, Vocabulary};
use crate::prompt;

/// A generated text mentions one or two categories.
pub const MAX_CATEGORIES: usize = 2;

/// Which backend produced each stage of a record.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub text_generator: String,
    pub image_generator: String,
    pub detector: String,
    pub segmenter: String,
}

/// One dataset quadruplet: text, counterfactual text, the image pair and the
/// per-category masks of the original image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub text: String,
    pub counterfactual_text: String,
    pub categories: Vec<CategoryId>,
    pub image_ref: String,
    pub counterfactual_image_ref: String,
    pub masks: Vec<ClassMask>,
    pub seed: u64,
    pub provenance: Provenance,
}

impl SampleRecord {
    pub fn mask_for(&self, id: CategoryId) -> Option<&ClassMask> {
        self.masks.iter().find(|m| m.category_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyText,
    CategoryCountOutOfRange(usize),
    DuplicateCategory(CategoryId),
    UnknownCategory(CategoryId),
    MissingMask(CategoryId),
    DuplicateMask(CategoryId),
    MaskCategoryNotListed(CategoryId),
    MaskDimensions {
        category: CategoryId,
        mask: (u32, u32),
        image: (u32, u32),
    },
    RunSum {
        category: CategoryId,
        expected: u64,
        actual: u64,
    },
    InteriorZeroRun(CategoryId),
    CounterfactualTextMismatch,
    EmptyImageRef,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty record id"),
            Violation::EmptyText => write!(f, "empty text"),
            Violation::CategoryCountOutOfRange(n) => {
                write!(f, "category count out of range ({n}, expected 1..={MAX_CATEGORIES})")
            }
            Violation::DuplicateCategory(c) => write!(f, "duplicate category {c}"),
            Violation::UnknownCategory(c) => write!(f, "unknown category id {c}"),
            Violation::MissingMask(c) => write!(f, "missing mask for category {c}"),
            Violation::DuplicateMask(c) => write!(f, "more than one mask for category {c}"),
            Violation::MaskCategoryNotListed(c) => {
                write!(f, "mask category {c} not listed in categories")
            }
            Violation::MaskDimensions { category, mask, image } => write!(
                f,
                "mask dimensions {}x{} for category {category} do not match image {}x{}",
                mask.0, mask.1, image.0, image.1
            ),
            Violation::RunSum { category, expected, actual } => write!(
                f,
                "mask runs for category {category} sum to {actual}, expected {expected}"
            ),
            Violation::InteriorZeroRun(c) => write!(f, "mask for category {c} has an interior zero run"),
            Violation::CounterfactualTextMismatch => {
                write!(f, "counterfactual text is not the class-name substitution of text")
            }
            Violation::EmptyImageRef => write!(f, "empty image reference"),
        }
    }
}

/// Reports every invariant a record breaks. `image_dims` is the size of the
/// referenced image when known; otherwise masks are only checked against each
/// other.
pub fn validate_sample(
    record: &SampleRecord,
    vocabulary: &Vocabulary,
    image_dims: Option<(u32, u32)>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.id.trim().is_empty() {
        out.push(Violation::EmptyId);
    }
    if record.text.trim().is_empty() {
        out.push(Violation::EmptyText);
    }
    if record.image_ref.is_empty() || record.counterfactual_image_ref.is_empty() {
        out.push(Violation::EmptyImageRef);
    }
    let n = record.categories.len();
    if n == 0 || n > MAX_CATEGORIES {
        out.push(Violation::CategoryCountOutOfRange(n));
    }

    let mut seen = BTreeSet::new();
    for &c in &record.categories {
        if !seen.insert(c) {
            out.push(Violation::DuplicateCategory(c));
        }
        if !vocabulary.contains(c) {
            out.push(Violation::UnknownCategory(c));
        }
    }

    let mut masked = BTreeSet::new();
    let dims = image_dims.or_else(|| record.masks.first().map(|m| (m.width, m.height)));
    for mask in &record.masks {
        let c = mask.category_id;
        if !seen.contains(&c) {
            out.push(Violation::MaskCategoryNotListed(c));
        }
        if !masked.insert(c) {
            out.push(Violation::DuplicateMask(c));
        }
        if let Some(image) = dims {
            if (mask.width, mask.height) != image {
                out.push(Violation::MaskDimensions {
                    category: c,
                    mask: (mask.width, mask.height),
                    image,
                });
            }
        }
        let expected = mask.pixel_count() as u64;
        let actual = mask.run_sum();
        if expected != actual {
            out.push(Violation::RunSum { category: c, expected, actual });
        }
        if mask.has_interior_zero_run() {
            out.push(Violation::InteriorZeroRun(c));
        }
    }
    for &c in &seen {
        if !masked.contains(&c) {
            out.push(Violation::MissingMask(c));
        }
    }

    let names: Vec<&str> = record
        .categories
        .iter()
        .filter_map(|&c| vocabulary.name(c))
        .collect();
    if !names.is_empty() && prompt::counterfactualize(&record.text, &names).text != record.counterfactual_text {
        out.push(Violation::CounterfactualTextMismatch);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(["cat", "dog", "bus", "tree"]).unwrap()
    }

    fn mask(c: u32, w: u32, h: u32) -> ClassMask {
        let mut grid = vec![0u8; (w * h) as usize];
        grid[0] = 1;
        ClassMask::encode(CategoryId(c), &grid, w, h).unwrap()
    }

    fn record() -> SampleRecord {
        SampleRecord {
            id: "s000000".into(),
            text: "A tabby cat naps on a porch.".into(),
            counterfactual_text: "A tabby nothing naps on a porch.".into(),
            categories: vec![CategoryId(0)],
            image_ref: "images/s000000.png".into(),
            counterfactual_image_ref: "images/s000000_co.png".into(),
            masks: vec![mask(0, 32, 32)],
            seed: 1,
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn well_formed_record_is_valid() {
        assert_eq!(validate_sample(&record(), &vocab(), Some((32, 32))), vec![]);
    }

    #[test]
    fn three_categories_out_of_range() {
        let mut r = record();
        r.categories = vec![CategoryId(0), CategoryId(1), CategoryId(2)];
        r.masks = vec![mask(0, 32, 32), mask(1, 32, 32), mask(2, 32, 32)];
        let v = validate_sample(&r, &vocab(), None);
        assert!(v.contains(&Violation::CategoryCountOutOfRange(3)));
        assert!(v[0].to_string().contains("category count out of range"));
    }

    #[test]
    fn mask_dims_must_match_image() {
        let mut r = record();
        r.masks = vec![mask(0, 64, 64)];
        let v = validate_sample(&r, &vocab(), Some((32, 32)));
        assert_eq!(
            v,
            vec![Violation::MaskDimensions { category: CategoryId(0), mask: (64, 64), image: (32, 32) }]
        );
    }

    #[test]
    fn reports_several_problems_at_once() {
        let mut r = record();
        r.categories = vec![CategoryId(0), CategoryId(9)];
        r.masks = vec![mask(1, 32, 32)];
        r.counterfactual_text = "A tabby cat naps on a porch.".into();
        let v = validate_sample(&r, &vocab(), None);
        assert!(v.contains(&Violation::UnknownCategory(CategoryId(9))));
        assert!(v.contains(&Violation::MaskCategoryNotListed(CategoryId(1))));
        assert!(v.contains(&Violation::MissingMask(CategoryId(0))));
        assert!(v.contains(&Violation::CounterfactualTextMismatch));
    }

    #[test]
    fn bad_runs_reported() {
        let mut r = record();
        r.masks[0].runs = vec![3, 0, 4];
        let v = validate_sample(&r, &vocab(), None);
        assert!(v.iter().any(|x| matches!(x, Violation::RunSum { .. })));
        assert!(v.contains(&Violation::InteriorZeroRun(CategoryId(0))));
    }
}
