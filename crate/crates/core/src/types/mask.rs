//! Binary per-category masks stored as run lengths.
//!
//! Runs alternate background/foreground over the row-major pixel scan and
//! always start with a background run, which is zero when the first pixel is
//! foreground.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::CategoryId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("grid has {actual} cells, expected {width}x{height}={expected}")]
    DimensionMismatch {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("grid value {value} at index {index} is not binary")]
    NonBinary { index: usize, value: u8 },
    #[error("runs sum to {actual}, expected {expected}")]
    RunSum { expected: u64, actual: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMask {
    pub category_id: CategoryId,
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

/// Run-length encodes a row-major binary grid.
pub fn rle_encode(grid: &[u8], width: u32, height: u32) -> Result<Vec<u32>, MaskError> {
    let expected = width as usize * height as usize;
    if grid.len() != expected {
        return Err(MaskError::DimensionMismatch {
            width,
            height,
            expected,
            actual: grid.len(),
        });
    }
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut len = 0u32;
    for (index, &value) in grid.iter().enumerate() {
        if value > 1 {
            return Err(MaskError::NonBinary { index, value });
        }
        if value == current {
            len += 1;
        } else {
            runs.push(len);
            current = value;
            len = 1;
        }
    }
    runs.push(len);
    Ok(runs)
}

/// Expands a mask back into a row-major 0/1 grid.
pub fn rle_decode(mask: &ClassMask) -> Result<Vec<u8>, MaskError> {
    let expected = mask.pixel_count() as u64;
    let actual: u64 = mask.runs.iter().map(|&r| u64::from(r)).sum();
    if actual != expected {
        return Err(MaskError::RunSum { expected, actual });
    }
    let mut grid = Vec::with_capacity(expected as usize);
    for (i, &run) in mask.runs.iter().enumerate() {
        let value = (i % 2) as u8;
        grid.extend(std::iter::repeat_n(value, run as usize));
    }
    Ok(grid)
}

impl ClassMask {
    pub fn encode(
        category_id: CategoryId,
        grid: &[u8],
        width: u32,
        height: u32,
    ) -> Result<Self, MaskError> {
        Ok(ClassMask {
            category_id,
            width,
            height,
            runs: rle_encode(grid, width, height)?,
        })
    }

    pub fn decode(&self) -> Result<Vec<u8>, MaskError> {
        rle_decode(self)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| u64::from(r)).sum()
    }

    pub fn run_sum(&self) -> u64 {
        self.runs.iter().map(|&r| u64::from(r)).sum()
    }

    /// True when some run other than the first is empty.
    pub fn has_interior_zero_run(&self) -> bool {
        self.runs.iter().skip(1).any(|&r| r == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trivial_masks() {
        assert_eq!(rle_encode(&[0, 0, 0, 0], 2, 2).unwrap(), vec![4]);
        assert_eq!(rle_encode(&[1, 1, 1, 1], 2, 2).unwrap(), vec![0, 4]);
        // row-major scan of [1,0,1]: zero background, one fg, one bg, one fg
        assert_eq!(rle_encode(&[1, 0, 1], 3, 1).unwrap(), vec![0, 1, 1, 1]);
    }

    #[test]
    fn trivial_decodes() {
        let m = |runs: Vec<u32>| ClassMask { category_id: CategoryId(0), width: 2, height: 2, runs };
        assert_eq!(m(vec![4]).decode().unwrap(), vec![0, 0, 0, 0]);
        assert_eq!(m(vec![0, 4]).decode().unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(m(vec![0, 4]).area(), 4);
    }

    #[test]
    fn encode_errors() {
        assert!(matches!(
            rle_encode(&[0, 1, 0], 2, 2),
            Err(MaskError::DimensionMismatch { expected: 4, actual: 3, .. })
        ));
        assert_eq!(
            rle_encode(&[0, 2], 2, 1),
            Err(MaskError::NonBinary { index: 1, value: 2 })
        );
    }

    #[test]
    fn decode_rejects_bad_run_sum() {
        let mask = ClassMask { category_id: CategoryId(0), width: 2, height: 2, runs: vec![1, 2] };
        assert_eq!(mask.decode(), Err(MaskError::RunSum { expected: 4, actual: 3 }));
    }

    #[test]
    fn encoder_never_emits_interior_zeros() {
        let runs = rle_encode(&[1, 1, 0, 0, 1], 5, 1).unwrap();
        assert_eq!(runs, vec![0, 2, 2, 1]);
        let mask = ClassMask { category_id: CategoryId(0), width: 5, height: 1, runs };
        assert!(!mask.has_interior_zero_run());
    }

    proptest! {
        #[test]
        fn roundtrip(width in 1u32..24, height in 1u32..24, seed in any::<u64>()) {
            let n = (width * height) as usize;
            let grid: Vec<u8> = (0..n).map(|i| ((crate::seed::derive(seed, i as u64) >> 7) & 1) as u8).collect();
            let mask = ClassMask::encode(CategoryId(3), &grid, width, height).unwrap();
            prop_assert_eq!(mask.run_sum(), n as u64);
            prop_assert!(!mask.has_interior_zero_run());
            prop_assert_eq!(mask.area(), grid.iter().map(|&v| v as u64).sum::<u64>());
            prop_assert_eq!(mask.decode().unwrap(), grid);
        }
    }
}
