//! Category random sampling: every image predicts masks for its known
//! categories plus uniformly drawn negatives, `m` categories in total.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::types::CategoryId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("subset size {m} is smaller than the {known} known categories")]
    TooSmall { m: usize, known: usize },
    #[error("subset size {m} exceeds vocabulary size {vocab}")]
    TooLarge { m: usize, vocab: usize },
    #[error("known category {0} is outside the vocabulary")]
    UnknownCategory(CategoryId),
    #[error("known category {0} listed twice")]
    Duplicate(CategoryId),
}

/// Known categories first, then sampled negatives, in draw order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySubset {
    ids: Vec<CategoryId>,
    known: usize,
}

impl CategorySubset {
    pub fn ids(&self) -> &[CategoryId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn known_count(&self) -> usize {
        self.known
    }

    pub fn is_known(&self, position: usize) -> bool {
        position < self.known
    }

    pub fn negatives(&self) -> &[CategoryId] {
        &self.ids[self.known..]
    }
}

/// How many categories each image predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetSize {
    Fixed(usize),
    /// Only the known categories (no negatives).
    Known,
    /// The whole vocabulary.
    Full,
}

impl SubsetSize {
    pub fn resolve(self, known: usize, vocab: usize) -> usize {
        match self {
            SubsetSize::Fixed(m) => m,
            SubsetSize::Known => known,
            SubsetSize::Full => vocab,
        }
    }
}

impl Default for SubsetSize {
    fn default() -> Self {
        SubsetSize::Fixed(100)
    }
}

impl fmt::Display for SubsetSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetSize::Fixed(m) => write!(f, "{m}"),
            SubsetSize::Known => f.write_str("known"),
            SubsetSize::Full => f.write_str("full"),
        }
    }
}

impl FromStr for SubsetSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "known" | "c" | "|c|" => Ok(SubsetSize::Known),
            "full" | "all" | "n" => Ok(SubsetSize::Full),
            other => other
                .parse::<usize>()
                .map(SubsetSize::Fixed)
                .map_err(|_| format!("subset size must be a number, \"known\" or \"full\", got {s:?}")),
        }
    }
}

impl Serialize for SubsetSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            SubsetSize::Fixed(m) => s.serialize_u64(*m as u64),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for SubsetSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(m) => Ok(SubsetSize::Fixed(m)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Draws `m - |known|` distinct negatives uniformly from the rest of the
/// vocabulary and appends them after the known categories.
pub fn sample_categories<R: Rng + ?Sized>(
    known: &[CategoryId],
    vocab_size: usize,
    m: usize,
    rng: &mut R,
) -> Result<CategorySubset, SamplerError> {
    if m < known.len() {
        return Err(SamplerError::TooSmall { m, known: known.len() });
    }
    if m > vocab_size {
        return Err(SamplerError::TooLarge { m, vocab: vocab_size });
    }
    let mut is_known = vec![false; vocab_size];
    for &c in known {
        let slot = is_known.get_mut(c.index()).ok_or(SamplerError::UnknownCategory(c))?;
        if *slot {
            return Err(SamplerError::Duplicate(c));
        }
        *slot = true;
    }
    let mut pool: Vec<CategoryId> = (0..vocab_size).filter(|&i| !is_known[i]).map(CategoryId::from).collect();
    let draws = m - known.len();
    // partial Fisher-Yates: the first `draws` slots end up a uniform sample
    for i in 0..draws {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let mut ids = known.to_vec();
    ids.extend_from_slice(&pool[..draws]);
    Ok(CategorySubset { ids, known: known.len() })
}

/// One independently drawn subset per image, consuming `rng` in batch order.
pub fn batch_subsets<R: Rng + ?Sized>(
    batch: &[Vec<CategoryId>],
    vocab_size: usize,
    size: SubsetSize,
    rng: &mut R,
) -> Result<Vec<CategorySubset>, SamplerError> {
    batch
        .iter()
        .map(|known| sample_categories(known, vocab_size, size.resolve(known.len(), vocab_size), rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use std::collections::BTreeSet;

    #[test]
    fn m_equal_known_returns_known() {
        let s = sample_categories(&[CategoryId(3)], 10, 1, &mut seed::rng(0)).unwrap();
        assert_eq!(s.ids(), &[CategoryId(3)]);
        assert!(s.negatives().is_empty());
    }

    #[test]
    fn full_vocab_is_a_permutation() {
        let s = sample_categories(&[CategoryId(3), CategoryId(7)], 12, 12, &mut seed::rng(1)).unwrap();
        assert_eq!(&s.ids()[..2], &[CategoryId(3), CategoryId(7)]);
        let set: BTreeSet<_> = s.ids().iter().copied().collect();
        assert_eq!(set.len(), 12);
        assert!(s.is_known(1) && !s.is_known(2));
    }

    #[test]
    fn errors() {
        let mut rng = seed::rng(0);
        let two = [CategoryId(1), CategoryId(2)];
        assert_eq!(sample_categories(&two, 5, 1, &mut rng), Err(SamplerError::TooSmall { m: 1, known: 2 }));
        assert_eq!(sample_categories(&two, 5, 6, &mut rng), Err(SamplerError::TooLarge { m: 6, vocab: 5 }));
        assert_eq!(
            sample_categories(&[CategoryId(9)], 5, 2, &mut rng),
            Err(SamplerError::UnknownCategory(CategoryId(9)))
        );
        assert_eq!(
            sample_categories(&[CategoryId(1), CategoryId(1)], 5, 3, &mut rng),
            Err(SamplerError::Duplicate(CategoryId(1)))
        );
    }

    #[test]
    fn batch_cases() {
        let mut rng = seed::rng(5);
        assert!(batch_subsets(&[], 1205, SubsetSize::Fixed(100), &mut rng).unwrap().is_empty());
        let batch: Vec<Vec<CategoryId>> = (0..8).map(|i| vec![CategoryId(i)]).collect();
        let subsets = batch_subsets(&batch, 1205, SubsetSize::Fixed(100), &mut rng).unwrap();
        assert_eq!(subsets.len(), 8);
        for i in 0..8 {
            for j in (i + 1)..8 {
                let a: BTreeSet<_> = subsets[i].negatives().iter().collect();
                let b: BTreeSet<_> = subsets[j].negatives().iter().collect();
                assert_ne!(a, b);
            }
        }
        let full = batch_subsets(&batch, 12, SubsetSize::Full, &mut rng).unwrap();
        let first: BTreeSet<_> = full[0].ids().iter().copied().collect();
        assert!(full.iter().all(|s| s.ids().iter().copied().collect::<BTreeSet<_>>() == first));
        let known = batch_subsets(&batch, 12, SubsetSize::Known, &mut rng).unwrap();
        assert!(known.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn subset_size_parsing() {
        assert_eq!("8".parse::<SubsetSize>().unwrap(), SubsetSize::Fixed(8));
        assert_eq!("full".parse::<SubsetSize>().unwrap(), SubsetSize::Full);
        assert_eq!("known".parse::<SubsetSize>().unwrap(), SubsetSize::Known);
        assert!("x".parse::<SubsetSize>().is_err());
        let v: SubsetSize = serde_json::from_str("100").unwrap();
        assert_eq!(v, SubsetSize::Fixed(100));
        let v: SubsetSize = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(serde_json::to_string(&v).unwrap(), "\"full\"");
    }
}
