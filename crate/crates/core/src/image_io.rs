//! 8-bit RGB PNG encoding and the base64 transport form used on the wire.

use std::io::Cursor;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
pub use image::RgbImage;
use image::{ImageFormat, ImageReader};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory PNG encode");
    buf.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, ImageIoError> {
    let img = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png).decode()?;
    Ok(img.to_rgb8())
}

pub fn to_base64_png(img: &RgbImage) -> String {
    B64.encode(encode_png(img))
}

pub fn from_base64_png(s: &str) -> Result<RgbImage, ImageIoError> {
    decode_png(&B64.decode(s)?)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_png(img)).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_png(path: &Path) -> Result<RgbImage, ImageIoError> {
    let bytes = std::fs::read(path).map_err(|source| ImageIoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_png(&bytes)
}

/// Reads only the PNG header.
pub fn png_dimensions(path: &Path) -> Result<(u32, u32), ImageIoError> {
    Ok(image::image_dimensions(path)?)
}
