//! Blocking HTTP client for a remote model service.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::*;
use super::{BackendError, DetectionBox, Detector, ImageGenerator, MaskGrid, Segmenter, TextGenerator, TextRequest};
use crate::image_io::{from_base64_png, to_base64_png, RgbImage};
use crate::types::{rle_decode, CategoryId, ClassMask};

/// One base URL, POSTing JSON to the contract's endpoints. Every attempt is
/// bounded by `timeout`; transport errors and 5xx responses are retried.
#[derive(Debug, Clone)]
pub struct RemoteClient {
    base: String,
    agent: ureq::Agent,
    retries: u32,
}

impl RemoteClient {
    pub fn new(base_url: &str, timeout_secs: f64, retries: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteClient {
            base: base_url.trim_end_matches('/').to_string(),
            agent,
            retries,
        }
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, BackendError> {
        let url = format!("{}{}", self.base, path);
        let attempts = self.retries + 1;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    let text = resp.body_mut().read_to_string().unwrap_or_default();
                    if status >= 500 {
                        last = format!("status {status}: {text}");
                    } else if status >= 400 {
                        return Err(BackendError::Rejected { endpoint: url, status, message: text });
                    } else if text.trim().is_empty() {
                        return Err(BackendError::EmptyResponse(url));
                    } else {
                        return serde_json::from_str(&text)
                            .map_err(|e| BackendError::Malformed { endpoint: url.clone(), message: e.to_string() });
                    }
                }
                Err(e) => last = e.to_string(),
            }
            log::warn!("{url}: attempt {attempt}/{attempts} failed: {last}");
        }
        Err(BackendError::Transport { endpoint: url, attempts, message: last })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

impl TextGenerator for RemoteClient {
    fn id(&self) -> String {
        self.url(GENERATE_TEXT)
    }

    fn generate_text(&self, request: &TextRequest<'_>) -> Result<String, BackendError> {
        if request.instruction.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty instruction".into()));
        }
        let resp: GenerateTextResponse =
            self.post(GENERATE_TEXT, &GenerateTextRequest { instruction: request.instruction.to_string() })?;
        if resp.text.trim().is_empty() {
            return Err(BackendError::EmptyResponse(self.url(GENERATE_TEXT)));
        }
        Ok(resp.text)
    }
}

impl ImageGenerator for RemoteClient {
    fn id(&self) -> String {
        self.url(GENERATE_IMAGE)
    }

    fn generate_image(&self, text: &str, seed: u64, width: u32, height: u32) -> Result<RgbImage, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        let req = GenerateImageRequest { text: text.to_string(), seed, width, height };
        let resp: GenerateImageResponse = self.post(GENERATE_IMAGE, &req)?;
        let img = from_base64_png(&resp.image_b64).map_err(|e| BackendError::Malformed {
            endpoint: self.url(GENERATE_IMAGE),
            message: e.to_string(),
        })?;
        if img.dimensions() != (width, height) {
            return Err(BackendError::DimensionMismatch {
                endpoint: self.url(GENERATE_IMAGE),
                expected: (width, height),
                actual: img.dimensions(),
            });
        }
        Ok(img)
    }
}

impl Detector for RemoteClient {
    fn id(&self) -> String {
        self.url(DETECT)
    }

    fn detect(&self, image: &RgbImage, categories: &[&str]) -> Result<Vec<DetectionBox>, BackendError> {
        if categories.is_empty() {
            return Err(BackendError::InvalidRequest("no categories to detect".into()));
        }
        let req = DetectRequest {
            image_b64: to_base64_png(image),
            categories: categories.iter().map(|c| c.to_string()).collect(),
        };
        let resp: DetectResponse = self.post(DETECT, &req)?;
        let mut boxes: Vec<DetectionBox> = resp
            .boxes
            .into_iter()
            .filter(|b| b.is_valid(image.width(), image.height()))
            .collect();
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(boxes)
    }
}

impl Segmenter for RemoteClient {
    fn id(&self) -> String {
        self.url(SEGMENT)
    }

    fn segment(&self, image: &RgbImage, detection: &DetectionBox) -> Result<MaskGrid, BackendError> {
        if !detection.is_valid(image.width(), image.height()) {
            return Err(BackendError::InvalidRequest(format!("invalid box {detection:?}")));
        }
        let req = SegmentRequest { image_b64: to_base64_png(image), detection: detection.clone() };
        let resp: SegmentResponse = self.post(SEGMENT, &req)?;
        if (resp.width, resp.height) != image.dimensions() {
            return Err(BackendError::DimensionMismatch {
                endpoint: self.url(SEGMENT),
                expected: image.dimensions(),
                actual: (resp.width, resp.height),
            });
        }
        let mask = ClassMask { category_id: CategoryId(0), width: resp.width, height: resp.height, runs: resp.runs };
        let data = rle_decode(&mask).map_err(|e| BackendError::Malformed {
            endpoint: self.url(SEGMENT),
            message: e.to_string(),
        })?;
        Ok(MaskGrid { width: resp.width, height: resp.height, data })
    }
}
