//! `CNNW0001` weight files and their JSON sidecar metadata.
//!
//! Layout (little-endian): the 8-byte magic `CNNW0001`, `u32` layer count,
//! then per conv layer in spec order: `u16` name length, UTF-8 name,
//! `u32` out channels, `u32` in channels, `out × in × 3 × 3` `f32` kernel
//! values (output-major, then input, row, column) and `out` `f32` biases.
//! Nothing may follow the last layer.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{ChannelOrder, PreprocessSpec};
use crate::network::{Network, NetworkSpec};
use crate::tensor::ConvWeights;

pub const WEIGHT_MAGIC: &[u8; 8] = b"CNNW0001";

/// Serializes conv weights in spec order. Values are stored as `f32`.
pub fn encode_weights(network: &Network) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    let convs: Vec<_> = network.conv_weights().collect();
    buf.extend_from_slice(&(convs.len() as u32).to_le_bytes());
    for (layer, w) in convs {
        buf.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(layer.name.as_bytes());
        buf.extend_from_slice(&(w.out_channels() as u32).to_le_bytes());
        buf.extend_from_slice(&(w.in_channels() as u32).to_le_bytes());
        for &v in w.kernel().iter().chain(w.bias()) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn save_weights(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(network)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>, spec: &NetworkSpec) -> Result<Network> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, spec)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            what: self.what,
            offset: self.pos,
            message: message.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!("truncated file while reading {context}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, context: &str) -> Result<u8> {
        Ok(self.take(1, context)?[0])
    }

    pub(crate) fn u16(&mut self, context: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, context: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, context: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.error("size overflow"))?, context)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize, context: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.error("size overflow"))?, context)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn name(&mut self, context: &str) -> Result<String> {
        let len = self.u16(context)? as usize;
        let start = self.pos;
        let raw = self.take(len, context)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            what: self.what,
            offset: start,
            message: format!("{context}: name is not valid UTF-8"),
        })
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.bytes.len() < 8 || &self.bytes[..8] != magic {
            return Err(self.error("bad magic"));
        }
        self.pos = 8;
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn decode_weights(bytes: &[u8], spec: &NetworkSpec) -> Result<Network> {
    let mut r = Reader::new(bytes, "weight file");
    r.expect_magic(WEIGHT_MAGIC)?;
    let expected: Vec<_> = spec.conv_layers().collect();
    let count = r.u32("layer count")? as usize;
    if count != expected.len() {
        return Err(r.error(format!(
            "file has {count} layers, spec expects {} conv layers",
            expected.len()
        )));
    }
    let mut weights = Vec::with_capacity(count);
    for layer in expected {
        let ctx = format!("layer {}", layer.name);
        let name = r.name(&ctx)?;
        if name != layer.name {
            return Err(r.error(format!("expected layer {}, found {name:?}", layer.name)));
        }
        let out = r.u32(&ctx)? as usize;
        let inp = r.u32(&ctx)? as usize;
        if out != layer.out_channels || inp != layer.in_channels {
            return Err(r.error(format!(
                "layer {}: file has {out}x{inp}x3x3, spec needs {}x{}x3x3",
                layer.name, layer.out_channels, layer.in_channels
            )));
        }
        let kernel = r.f32s(out * inp * 9, &format!("layer {} kernel", layer.name))?;
        let bias = r.f32s(out, &format!("layer {} bias", layer.name))?;
        let w = ConvWeights::new(out, inp, kernel, bias).map_err(|e| r.error(format!("layer {}: {e}", layer.name)))?;
        weights.push(w);
    }
    r.finish()?;
    Network::new(spec.clone(), weights)
}

/// Sidecar metadata stored next to a weight file as `<weights>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_checksum: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_mapping: Option<serde_json::Map<String, serde_json::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_order: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing_means: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversion_timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale_calibration: Option<RescaleRecord>,
}

/// Provenance of a unit-mean rescaling run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleRecord {
    pub calibration_dir: String,
    pub images: Vec<String>,
    pub pooling: String,
}

impl WeightMetadata {
    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut s = weights.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Reads the sidecar for `weights` if one exists.
    pub fn load_for(weights: &Path) -> Result<Option<Self>> {
        let path = Self::sidecar_path(weights);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }

    pub fn save_for(&self, weights: &Path) -> Result<()> {
        let path = Self::sidecar_path(weights);
        let text = serde_json::to_string_pretty(self).expect("metadata serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Preprocessing implied by the metadata, falling back to the VGG
    /// convention for anything unspecified.
    pub fn preprocess_spec(&self) -> Result<PreprocessSpec> {
        let mut spec = PreprocessSpec::vgg();
        if let Some(order) = &self.channel_order {
            spec.channel_order = order.parse::<ChannelOrder>()?;
        }
        if let Some(means) = self.preprocessing_means {
            spec.channel_means = means;
        }
        if let Some(scale) = self.scale {
            spec.scale = scale;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{random_init, tiny_spec, LayerSpec};

    #[test]
    fn round_trip_is_exact() {
        let net = random_init(&tiny_spec(), 5, 0.3).unwrap();
        let bytes = encode_weights(&net);
        let back = decode_weights(&bytes, &tiny_spec()).unwrap();
        assert_eq!(back, net);
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let net = random_init(&tiny_spec(), 5, 0.3).unwrap();
        let bytes = encode_weights(&net);
        assert_eq!(&bytes[..8], &[0x43, 0x4E, 0x4E, 0x57, 0x30, 0x30, 0x30, 0x31]);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 7);
        assert_eq!(&bytes[14..21], b"conv1_1");
        assert_eq!(u32::from_le_bytes(bytes[21..25].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 3);
        let expected_len = 12 + (2 + 7 + 8 + (8 * 3 * 9 + 8) * 4) + (2 + 7 + 8 + (16 * 8 * 9 + 16) * 4);
        assert_eq!(bytes.len(), expected_len);
    }

    #[test]
    fn rejects_malformed_files() {
        let spec = tiny_spec();
        let bytes = encode_weights(&random_init(&spec, 1, 0.1).unwrap());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_weights(&bad, &spec).unwrap_err().to_string().contains("bad magic"));

        let err = decode_weights(&bytes[..bytes.len() - 3], &spec).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(err.to_string().contains("conv1_2"), "{err}");

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_weights(&extra, &spec).unwrap_err().to_string().contains("trailing"));

        let other = NetworkSpec::new(vec![LayerSpec::conv("conv1_1", 3, 8), LayerSpec::conv("conv1_2", 8, 32)]).unwrap();
        let err = decode_weights(&bytes, &other).unwrap_err();
        assert!(err.to_string().contains("conv1_2"), "{err}");
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = dir.path().join("net.cnnw");
        assert!(WeightMetadata::load_for(&w).unwrap().is_none());
        let meta = WeightMetadata {
            channel_order: Some("rgb".into()),
            preprocessing_means: Some([1.0, 2.0, 3.0]),
            ..Default::default()
        };
        meta.save_for(&w).unwrap();
        assert!(dir.path().join("net.cnnw.json").exists());
        let back = WeightMetadata::load_for(&w).unwrap().unwrap();
        assert_eq!(back, meta);
        let pp = back.preprocess_spec().unwrap();
        assert_eq!(pp.channel_order, ChannelOrder::Rgb);
        assert_eq!(pp.channel_means, [1.0, 2.0, 3.0]);
    }
}
