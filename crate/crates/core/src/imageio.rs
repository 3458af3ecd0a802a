//! 8-bit RGB images, binary PPM (P6) I/O, and the conversion between
//! images and preprocessed network input tensors.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} samples, got {}",
                3 * width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        what: "PPM",
        offset,
        message: message.into(),
    }
}

/// Skips whitespace and `#` comments; returns the new position.
fn skip_ws(bytes: &[u8], mut pos: usize) -> usize {
    while pos < bytes.len() {
        match bytes[pos] {
            b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => pos += 1,
            b'#' => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            _ => break,
        }
    }
    pos
}

fn header_number(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let start = skip_ws(bytes, *pos);
    if start == *pos {
        return Err(parse_err(start, format!("expected whitespace before {field}")));
    }
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(parse_err(start, format!("expected {field}")));
    }
    let value = std::str::from_utf8(&bytes[start..end])
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&v| v <= u32::MAX as usize)
        .ok_or_else(|| parse_err(start, format!("{field} out of range")))?;
    *pos = end;
    Ok(value)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image8> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(parse_err(0, "not a binary PPM (expected P6 magic)"));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval_at = skip_ws(bytes, pos);
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(parse_err(maxval_at, format!("unsupported maxval {maxval}")));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(parse_err(pos, "expected single whitespace after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(parse_err(pos, format!("empty image {width}x{height}")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| parse_err(pos, "image too large"))?;
    let have = bytes.len() - pos;
    if have < need {
        return Err(parse_err(bytes.len(), format!("truncated pixel data: need {need} bytes, found {have}")));
    }
    if have > need {
        return Err(parse_err(pos + need, format!("{} trailing bytes after pixel data", have - need)));
    }
    Image8::new(width, height, bytes[pos..].to_vec())
}

pub fn encode_ppm(image: &Image8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image8> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn save_ppm(image: &Image8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

impl std::str::FromStr for ChannelOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(ChannelOrder::Rgb),
            "bgr" => Ok(ChannelOrder::Bgr),
            _ => Err(Error::Validation(format!("unknown channel order {s:?}"))),
        }
    }
}

impl ChannelOrder {
    /// RGB sample index feeding tensor channel `c`.
    fn source_index(self, c: usize) -> usize {
        match self {
            ChannelOrder::Rgb => c,
            ChannelOrder::Bgr => 2 - c,
        }
    }
}

/// How 8-bit samples map to network inputs. `channel_means` are given in
/// tensor channel order (i.e. after reordering).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessSpec {
    pub channel_means: [f64; 3],
    pub channel_order: ChannelOrder,
    pub scale: f64,
}

impl PreprocessSpec {
    /// Convention of the published VGG weights: BGR order, raw 0–255 scale,
    /// ImageNet means.
    pub fn vgg() -> Self {
        Self {
            channel_means: [103.939, 116.779, 123.68],
            channel_order: ChannelOrder::Bgr,
            scale: 1.0,
        }
    }

    pub fn identity() -> Self {
        Self {
            channel_means: [0.0; 3],
            channel_order: ChannelOrder::Rgb,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Validation(format!("preprocess scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

pub fn preprocess(img: &Image8, spec: &PreprocessSpec) -> FeatureTensor {
    FeatureTensor::from_fn(3, img.height, img.width, |c, y, x| {
        let s = img.data[3 * (y * img.width + x) + spec.channel_order.source_index(c)];
        s as f64 * spec.scale - spec.channel_means[c]
    })
}

/// Inverse of [`preprocess`] followed by rounding (half away from zero) and
/// clamping to `0..=255`.
pub fn postprocess(t: &FeatureTensor, spec: &PreprocessSpec) -> Result<Image8> {
    if t.channels() != 3 {
        return Err(Error::Dimension(format!("postprocess needs 3 channels, got {}", t.channels())));
    }
    let (h, w) = (t.height(), t.width());
    let mut data = vec![0u8; 3 * h * w];
    for c in 0..3 {
        let dst = spec.channel_order.source_index(c);
        for y in 0..h {
            for x in 0..w {
                let v = (t.get(c, y, x) + spec.channel_means[c]) / spec.scale;
                data[3 * (y * w + x) + dst] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Image8::new(w, h, data)
}
