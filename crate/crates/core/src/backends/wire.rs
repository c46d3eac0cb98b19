//! JSON bodies of the HTTP backend contract, and a dispatcher that serves
//! any [`Backends`] bundle over that contract.

use serde::{Deserialize, Serialize};

use super::{BackendError, Backends, DetectionBox, TextRequest};
use crate::image_io::{from_base64_png, to_base64_png};
use crate::types::rle_encode;

pub const GENERATE_TEXT: &str = "/generate-text";
pub const GENERATE_IMAGE: &str = "/generate-image";
pub const DETECT: &str = "/detect";
pub const SEGMENT: &str = "/segment";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateTextRequest {
    pub instruction: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateTextResponse {
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateImageRequest {
    pub text: String,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateImageResponse {
    pub image_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectRequest {
    pub image_b64: String,
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectResponse {
    pub boxes: Vec<DetectionBox>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub image_b64: String,
    #[serde(rename = "box")]
    pub detection: DetectionBox,
}

/// Mask in the same run-length convention as manifest masks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub width: u32,
    pub height: u32,
    pub runs: Vec<u32>,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn bad_request(msg: impl ToString) -> (u16, String) {
    (400, serde_json::to_string(&ErrorBody { error: msg.to_string() }).expect("error body"))
}

fn ok<T: Serialize>(body: &T) -> (u16, String) {
    (200, serde_json::to_string(body).expect("response body"))
}

fn backend_failure(e: BackendError) -> (u16, String) {
    let status = match e {
        BackendError::InvalidRequest(_) => 400,
        _ => 502,
    };
    (status, serde_json::to_string(&ErrorBody { error: e.to_string() }).expect("error body"))
}

/// Handles one request body for `path`; returns HTTP status and JSON body.
///
/// Text requests carry only the instruction, so mock text generation behind
/// this dispatcher seeds from the instruction itself.
pub fn dispatch(backends: &Backends, path: &str, body: &str) -> (u16, String) {
    match path {
        GENERATE_TEXT => {
            let req: GenerateTextRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e),
            };
            let names = instruction_categories(&req.instruction);
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let seed = crate::seed::hash_bytes(req.instruction.as_bytes());
            let text_req = TextRequest { instruction: &req.instruction, categories: &names, seed };
            match backends.text.generate_text(&text_req) {
                Ok(text) => ok(&GenerateTextResponse { text }),
                Err(e) => backend_failure(e),
            }
        }
        GENERATE_IMAGE => {
            let req: GenerateImageRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e),
            };
            match backends.image.generate_image(&req.text, req.seed, req.width, req.height) {
                Ok(img) => ok(&GenerateImageResponse { image_b64: to_base64_png(&img) }),
                Err(e) => backend_failure(e),
            }
        }
        DETECT => {
            let req: DetectRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e),
            };
            let img = match from_base64_png(&req.image_b64) {
                Ok(i) => i,
                Err(e) => return bad_request(e),
            };
            let names: Vec<&str> = req.categories.iter().map(String::as_str).collect();
            match backends.detector.detect(&img, &names) {
                Ok(boxes) => ok(&DetectResponse { boxes }),
                Err(e) => backend_failure(e),
            }
        }
        SEGMENT => {
            let req: SegmentRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(e) => return bad_request(e),
            };
            let img = match from_base64_png(&req.image_b64) {
                Ok(i) => i,
                Err(e) => return bad_request(e),
            };
            match backends.segmenter.segment(&img, &req.detection) {
                Ok(mask) => {
                    let runs = rle_encode(&mask.data, mask.width, mask.height).expect("segmenter mask is binary");
                    ok(&SegmentResponse { width: mask.width, height: mask.height, runs })
                }
                Err(e) => backend_failure(e),
            }
        }
        other => (404, serde_json::to_string(&ErrorBody { error: format!("no route {other}") }).expect("error body")),
    }
}

/// Pulls the quoted category names out of an instruction built by
/// [`crate::prompt::build_instruction`].
pub fn instruction_categories(instruction: &str) -> Vec<String> {
    let Some(start) = instruction.find("must mention ") else { return Vec::new() };
    let rest = &instruction[start..];
    let line = rest.split(" by name").next().unwrap_or("");
    line.split('"').skip(1).step_by(2).map(str::to_string).collect()
}
