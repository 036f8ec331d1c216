//! Wire encodings: style vectors as hex of big-endian `f32` bytes, images as
//! base64 PNG.

use base64::Engine;
use image::RgbImage;
use lostgan_core::StyleState;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub fn encode_vector(v: &[f32]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_be_bytes()).collect();
    hex::encode(bytes)
}

pub fn decode_vector(s: &str) -> Result<Vec<f32>, ApiError> {
    let bytes = hex::decode(s).map_err(|e| ApiError::bad_request("MalformedStyle", format!("bad hex: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(ApiError::bad_request(
            "MalformedStyle",
            format!("{} bytes is not a whole number of f32 values", bytes.len()),
        ));
    }
    let v: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ApiError::bad_request("MalformedStyle", "style values must be finite"));
    }
    Ok(v)
}

/// Style as carried in requests and echoed in responses.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleWire {
    /// Seed the vectors were drawn from, when they were.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_img: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_obj: Option<Vec<String>>,
}

impl StyleWire {
    pub fn from_state(s: &StyleState) -> Self {
        Self {
            seed: s.seed,
            z_img: Some(encode_vector(&s.z_img)),
            z_obj: Some(s.z_obj.iter().map(|z| encode_vector(z)).collect()),
        }
    }

    /// Explicit vectors, if both are given.
    pub fn explicit(&self) -> Result<Option<StyleState>, ApiError> {
        match (&self.z_img, &self.z_obj) {
            (Some(zi), Some(zo)) => Ok(Some(StyleState {
                z_img: decode_vector(zi)?,
                z_obj: zo.iter().map(|z| decode_vector(z)).collect::<Result<_, _>>()?,
                seed: self.seed,
            })),
            (None, None) => Ok(None),
            _ => Err(ApiError::bad_request(
                "MalformedStyle",
                "z_img and z_obj must be given together",
            )),
        }
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, ApiError> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| ApiError::internal(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn base64_png(img: &RgbImage) -> Result<String, ApiError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(encode_png(img)?))
}

pub fn decode_base64(s: &str) -> Result<Vec<u8>, ApiError> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| ApiError::bad_request("MalformedDocument", format!("bad base64: {e}")))
}

/// Distinct display colors for category indices, background last.
pub fn category_palette(n: usize) -> Vec<[u8; 3]> {
    (0..=n)
        .map(|i| {
            if i == n {
                return [0, 0, 0];
            }
            let h = (i as f64 * 0.618_033_988_749_895).fract() * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as u32 {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let v = if i % 2 == 0 { 230.0 } else { 170.0 };
            [(r * v) as u8 + 20, (g * v) as u8 + 20, (b * v) as u8 + 20]
        })
        .collect()
}
