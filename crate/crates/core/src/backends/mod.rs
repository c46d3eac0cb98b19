//! Clients for the four external model roles and the procedural mock.
//!
//! | role            | trait             | wire endpoint          |
//! |-----------------|-------------------|------------------------|
//! | text generator  | [`TextGenerator`] | `POST /generate-text`  |
//! | image generator | [`ImageGenerator`]| `POST /generate-image` |
//! | detector        | [`Detector`]      | `POST /detect`         |
//! | segmenter       | [`Segmenter`]     | `POST /segment`        |

mod mock;
mod remote;
pub mod render;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::MockBackend;
pub use remote::RemoteClient;

use crate::image_io::RgbImage;
use crate::prompt;
use crate::types::{MaskError, Vocabulary};

pub const MOCK: &str = "mock";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{endpoint}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        endpoint: String,
        attempts: u32,
        message: String,
    },
    #[error("{endpoint}: request rejected with status {status}: {message}")]
    Rejected {
        endpoint: String,
        status: u16,
        message: String,
    },
    #[error("{0}: empty response")]
    EmptyResponse(String),
    #[error("{endpoint}: expected {expected:?} image, got {actual:?}")]
    DimensionMismatch {
        endpoint: String,
        expected: (u32, u32),
        actual: (u32, u32),
    },
    #[error("{endpoint}: malformed response: {message}")]
    Malformed { endpoint: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    Config(String),
}

/// Axis-aligned detection in continuous pixel-edge coordinates; pixel
/// `(x, y)` is inside when its center `(x + 0.5, y + 0.5)` lies in
/// `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub category: String,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
}

impl DetectionBox {
    pub fn is_valid(&self, width: u32, height: u32) -> bool {
        let (w, h) = (f64::from(width), f64::from(height));
        self.x0 < self.x1
            && self.y0 < self.y1
            && self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.x1 <= w
            && self.y1 <= h
            && (0.0..=1.0).contains(&self.confidence)
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        let (cx, cy) = (f64::from(x) + 0.5, f64::from(y) + 0.5);
        cx >= self.x0 && cx < self.x1 && cy >= self.y0 && cy < self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    pub fn iou(&self, other: &DetectionBox) -> f64 {
        let iw = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let ih = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Row-major binary grid returned by a segmenter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl MaskGrid {
    pub fn zeros(width: u32, height: u32) -> Self {
        MaskGrid { width, height, data: vec![0; width as usize * height as usize] }
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn union_with(&mut self, other: &MaskGrid) -> Result<(), MaskError> {
        if other.data.len() != self.data.len() {
            return Err(MaskError::DimensionMismatch {
                width: self.width,
                height: self.height,
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
        Ok(())
    }

    pub fn iou(&self, other: &MaskGrid) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += usize::from(a != 0 && b != 0);
            union += usize::from(a != 0 || b != 0);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Inputs for one text generation call. Remote backends only see the
/// instruction; the mock also uses the category names and seed.
#[derive(Debug, Clone, Copy)]
pub struct TextRequest<'a> {
    pub instruction: &'a str,
    pub categories: &'a [&'a str],
    pub seed: u64,
}

pub trait TextGenerator: Send + Sync {
    fn id(&self) -> String;
    fn generate_text(&self, request: &TextRequest<'_>) -> Result<String, BackendError>;
}

pub trait ImageGenerator: Send + Sync {
    fn id(&self) -> String;
    fn generate_image(&self, text: &str, seed: u64, width: u32, height: u32) -> Result<RgbImage, BackendError>;
}

pub trait Detector: Send + Sync {
    fn id(&self) -> String;
    /// Boxes sorted by confidence, highest first.
    fn detect(&self, image: &RgbImage, categories: &[&str]) -> Result<Vec<DetectionBox>, BackendError>;
}

pub trait Segmenter: Send + Sync {
    fn id(&self) -> String;
    fn segment(&self, image: &RgbImage, detection: &DetectionBox) -> Result<MaskGrid, BackendError>;
}

/// Renders the original image from `text` and the counterfactual image from
/// `counterfactual_text`, both with the same seed.
pub fn generate_pair(
    generator: &dyn ImageGenerator,
    text: &str,
    counterfactual_text: &str,
    seed: u64,
    width: u32,
    height: u32,
) -> Result<(RgbImage, RgbImage), BackendError> {
    let image = generator.generate_image(text, seed, width, height)?;
    let counterfactual = generator.generate_image(counterfactual_text, seed, width, height)?;
    Ok((image, counterfactual))
}

/// Category names that do not occur in a generated text.
pub fn missing_categories<'a>(text: &str, categories: &[&'a str]) -> Vec<&'a str> {
    categories
        .iter()
        .copied()
        .filter(|c| prompt::count_mentions(text, c) == 0)
        .collect()
}

/// Noise applied by the mock detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockNoise {
    /// Standard deviation, in pixels, added to every box coordinate.
    pub jitter_sigma: f64,
    /// Probability that a detection is dropped.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for MockNoise {
    fn default() -> Self {
        MockNoise { jitter_sigma: 0.0, dropout: 0.0, seed: 0 }
    }
}

impl MockNoise {
    pub fn is_off(&self) -> bool {
        self.jitter_sigma == 0.0 && self.dropout == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Base URL or `"mock"` for each role.
    pub text: String,
    pub image: String,
    pub detector: String,
    pub segmenter: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub mock: MockNoise,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            text: MOCK.into(),
            image: MOCK.into(),
            detector: MOCK.into(),
            segmenter: MOCK.into(),
            timeout_secs: 60.0,
            retries: 2,
            mock: MockNoise::default(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BackendError::Config(format!("timeout_secs must be > 0, got {}", self.timeout_secs)));
        }
        if !(0.0..=1.0).contains(&self.mock.dropout) {
            return Err(BackendError::Config(format!("mock.dropout must be in [0,1], got {}", self.mock.dropout)));
        }
        if !(self.mock.jitter_sigma >= 0.0 && self.mock.jitter_sigma.is_finite()) {
            return Err(BackendError::Config(format!(
                "mock.jitter_sigma must be >= 0, got {}",
                self.mock.jitter_sigma
            )));
        }
        for (role, ep) in self.endpoints() {
            if ep != MOCK && !(ep.starts_with("http://") || ep.starts_with("https://")) {
                return Err(BackendError::Config(format!("{role} endpoint must be \"mock\" or an http(s) URL, got {ep:?}")));
            }
        }
        Ok(())
    }

    fn endpoints(&self) -> [(&'static str, &str); 4] {
        [
            ("text", self.text.as_str()),
            ("image", self.image.as_str()),
            ("detector", self.detector.as_str()),
            ("segmenter", self.segmenter.as_str()),
        ]
    }
}

/// The four role clients used by the pipeline.
#[derive(Clone)]
pub struct Backends {
    pub text: Arc<dyn TextGenerator>,
    pub image: Arc<dyn ImageGenerator>,
    pub detector: Arc<dyn Detector>,
    pub segmenter: Arc<dyn Segmenter>,
}

impl Backends {
    pub fn mock(vocabulary: &Vocabulary, noise: MockNoise) -> Self {
        let m = Arc::new(MockBackend::new(vocabulary.clone(), noise));
        Backends {
            text: m.clone(),
            image: m.clone(),
            detector: m.clone(),
            segmenter: m,
        }
    }

    pub fn from_config(config: &BackendConfig, vocabulary: &Vocabulary) -> Result<Self, BackendError> {
        config.validate()?;
        let mock = Arc::new(MockBackend::new(vocabulary.clone(), config.mock.clone()));
        let remote = |url: &str| Arc::new(RemoteClient::new(url, config.timeout_secs, config.retries));
        Ok(Backends {
            text: if config.text == MOCK { mock.clone() } else { remote(&config.text) },
            image: if config.image == MOCK { mock.clone() } else { remote(&config.image) },
            detector: if config.detector == MOCK { mock.clone() } else { remote(&config.detector) },
            segmenter: if config.segmenter == MOCK { mock } else { remote(&config.segmenter) },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> DetectionBox {
        DetectionBox { category: "cat".into(), x0, y0, x1, y1, confidence: 1.0 }
    }

    #[test]
    fn box_geometry() {
        let a = bx(0.0, 0.0, 4.0, 2.0);
        let b = bx(0.0, 1.0, 4.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        assert!(a.contains_pixel(3, 1));
        assert!(!a.contains_pixel(4, 1));
        assert!(a.is_valid(4, 2));
        assert!(!a.is_valid(3, 2));
        assert!(!bx(2.0, 0.0, 2.0, 1.0).is_valid(4, 4));
    }

    #[test]
    fn config_validation() {
        let mut c = BackendConfig::default();
        assert!(c.validate().is_ok());
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
        c.timeout_secs = 1.0;
        c.detector = "ftp://x".into();
        assert!(c.validate().is_err());
        c.detector = "http://localhost:9".into();
        assert!(c.validate().is_ok());
        c.mock.dropout = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_category_flag() {
        assert_eq!(missing_categories("a red bus", &["bus", "cat"]), vec!["cat"]);
        assert!(missing_categories("a red bus", &["bus"]).is_empty());
    }
}
