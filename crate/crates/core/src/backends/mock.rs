//! Deterministic synthetic backend for all four roles.
//!
//! Text comes from the template generator, images from the procedural
//! renderer (categories are read back out of the text, so counterfactual text
//! renders the same background without the shapes), and detection and
//! segmentation recover shapes from their palette colors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::render::{self, Palette, RenderedScene};
use super::{BackendError, DetectionBox, Detector, ImageGenerator, MaskGrid, MockNoise, Segmenter, TextGenerator, TextRequest};
use crate::image_io::RgbImage;
use crate::prompt::{self, NameMatcher};
use crate::seed;
use crate::types::{CategoryId, Vocabulary};

#[derive(Debug, Clone)]
pub struct MockBackend {
    vocabulary: Vocabulary,
    palette: Palette,
    matcher: NameMatcher,
    noise: MockNoise,
}

impl MockBackend {
    pub fn new(vocabulary: Vocabulary, noise: MockNoise) -> Self {
        MockBackend {
            palette: Palette::new(vocabulary.len()),
            matcher: NameMatcher::new(&vocabulary),
            vocabulary,
            noise,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    /// The scene the image generator draws for `(text, seed)`, with its
    /// analytic ground truth.
    pub fn render_scene(&self, text: &str, seed: u64, width: u32, height: u32) -> RenderedScene {
        let categories = self.matcher.categories_in(text);
        render::plan_scene(&self.palette, &categories, seed, width, height).render()
    }

    fn category(&self, name: &str) -> Option<CategoryId> {
        self.vocabulary.id_of(name)
    }

    fn pixel_mask(&self, image: &RgbImage, id: CategoryId) -> MaskGrid {
        MaskGrid {
            width: image.width(),
            height: image.height(),
            data: image.pixels().map(|px| u8::from(self.palette.matches(px, id))).collect(),
        }
    }

    fn call_rng(&self, image: &RgbImage, name: &str) -> rand_chacha::ChaCha8Rng {
        let h = seed::hash_bytes(image.as_raw()) ^ seed::hash_bytes(name.as_bytes()).rotate_left(17);
        seed::rng(seed::derive(self.noise.seed, h))
    }

    fn degrade(&self, image: &RgbImage, mut b: DetectionBox) -> Option<DetectionBox> {
        if self.noise.is_off() {
            return Some(b);
        }
        let mut rng = self.call_rng(image, &b.category);
        if self.noise.dropout > 0.0 && rng.random::<f64>() < self.noise.dropout {
            return None;
        }
        if self.noise.jitter_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise.jitter_sigma).expect("sigma validated");
            let (w, h) = (f64::from(image.width()), f64::from(image.height()));
            let mut j = |v: f64, hi: f64| (v + normal.sample(&mut rng)).clamp(0.0, hi);
            let (x0, x1) = (j(b.x0, w), j(b.x1, w));
            let (y0, y1) = (j(b.y0, h), j(b.y1, h));
            b.x0 = x0.min(x1);
            b.x1 = x0.max(x1);
            b.y0 = y0.min(y1);
            b.y1 = y0.max(y1);
            // never hand back an empty box
            if b.x1 - b.x0 < 1.0 {
                b.x1 = (b.x0 + 1.0).min(w);
                b.x0 = b.x1 - 1.0;
            }
            if b.y1 - b.y0 < 1.0 {
                b.y1 = (b.y0 + 1.0).min(h);
                b.y0 = b.y1 - 1.0;
            }
        }
        Some(b)
    }
}

impl TextGenerator for MockBackend {
    fn id(&self) -> String {
        "mock-template".into()
    }

    fn generate_text(&self, request: &TextRequest<'_>) -> Result<String, BackendError> {
        if request.instruction.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty instruction".into()));
        }
        prompt::template_fallback(request.categories, request.seed)
            .map_err(|e| BackendError::InvalidRequest(e.to_string()))
    }
}

impl ImageGenerator for MockBackend {
    fn id(&self) -> String {
        "mock-render".into()
    }

    fn generate_image(&self, text: &str, seed: u64, width: u32, height: u32) -> Result<RgbImage, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        if width == 0 || height == 0 {
            return Err(BackendError::InvalidRequest(format!("bad resolution {width}x{height}")));
        }
        Ok(self.render_scene(text, seed, width, height).image)
    }
}

impl Detector for MockBackend {
    fn id(&self) -> String {
        "mock-palette-detector".into()
    }

    fn detect(&self, image: &RgbImage, categories: &[&str]) -> Result<Vec<DetectionBox>, BackendError> {
        if categories.is_empty() {
            return Err(BackendError::InvalidRequest("no categories to detect".into()));
        }
        let mut out = Vec::new();
        for &name in categories {
            let Some(id) = self.category(name) else { continue };
            let Some(b) = render::mask_bounds(&self.pixel_mask(image, id), name) else { continue };
            out.extend(self.degrade(image, b));
        }
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(out)
    }
}

impl Segmenter for MockBackend {
    fn id(&self) -> String {
        "mock-palette-segmenter".into()
    }

    fn segment(&self, image: &RgbImage, detection: &DetectionBox) -> Result<MaskGrid, BackendError> {
        if !detection.is_valid(image.width(), image.height()) {
            return Err(BackendError::InvalidRequest(format!("invalid box {detection:?}")));
        }
        let Some(id) = self.category(&detection.category) else {
            return Ok(MaskGrid::zeros(image.width(), image.height()));
        };
        let mut mask = self.pixel_mask(image, id);
        let w = image.width();
        for (i, v) in mask.data.iter_mut().enumerate() {
            let (x, y) = (i as u32 % w, i as u32 / w);
            if !detection.contains_pixel(x, y) {
                *v = 0;
            }
        }
        Ok(mask)
    }
}
