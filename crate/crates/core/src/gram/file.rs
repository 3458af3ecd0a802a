//! `GRMD0001` descriptor files.
//!
//! Little-endian. After the magic: `u32` entry count; per entry a `u16`
//! name length and UTF-8 layer name, `u8` statistic kind (0 gram, 1 pca,
//! 2 mean), `u32 n` (feature maps, or `k` for PCA), `u32 M_l`, then the
//! payload: `n(n+1)/2` `f64` upper-triangle values (row-major) for gram and
//! pca, `n` `f64` means for mean. PCA entries continue with `u32 k`,
//! `u32 N_l`, `N_l` `f64` centering values and `k × N_l` `f64` basis values.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::weights::Reader;

use super::pca::PcaBasis;
use super::{DescriptorEntry, GramMatrix, MeanVector, Statistic, TextureDescriptor};

pub const DESCRIPTOR_MAGIC: &[u8; 8] = b"GRMD0001";

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_descriptor(d: &TextureDescriptor) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DESCRIPTOR_MAGIC);
    buf.extend_from_slice(&(d.entries.len() as u32).to_le_bytes());
    for e in &d.entries {
        buf.extend_from_slice(&(e.layer.len() as u16).to_le_bytes());
        buf.extend_from_slice(e.layer.as_bytes());
        let kind: u8 = match e.statistic {
            Statistic::Gram(_) => 0,
            Statistic::Pca { .. } => 1,
            Statistic::Mean(_) => 2,
        };
        buf.push(kind);
        buf.extend_from_slice(&(e.statistic.size() as u32).to_le_bytes());
        buf.extend_from_slice(&(e.m as u32).to_le_bytes());
        put_f64s(&mut buf, &e.statistic.to_vector());
        if let Statistic::Pca { basis, .. } = &e.statistic {
            buf.extend_from_slice(&(basis.k as u32).to_le_bytes());
            buf.extend_from_slice(&(basis.n_features() as u32).to_le_bytes());
            put_f64s(&mut buf, &basis.mean);
            put_f64s(&mut buf, &basis.basis);
        }
    }
    buf
}

pub fn decode_descriptor(bytes: &[u8]) -> Result<TextureDescriptor> {
    let mut r = Reader::new(bytes, "descriptor file");
    r.expect_magic(DESCRIPTOR_MAGIC)?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let layer = r.name("entry name")?;
        let ctx = format!("entry {layer}");
        let kind = r.u8(&ctx)?;
        let n = r.u32(&ctx)? as usize;
        let m = r.u32(&ctx)? as usize;
        let (statistic, n_features) = match kind {
            0 | 1 => {
                let upper = r.f64s(n * (n + 1) / 2, &ctx)?;
                let gram = GramMatrix::from_upper(n, &upper)?;
                if kind == 0 {
                    (Statistic::Gram(gram), n)
                } else {
                    let k = r.u32(&ctx)? as usize;
                    if k != n {
                        return Err(r.error(format!("{ctx}: PCA k={k} disagrees with statistic size {n}")));
                    }
                    let nf = r.u32(&ctx)? as usize;
                    let mean = r.f64s(nf, &ctx)?;
                    let values = r.f64s(k * nf, &ctx)?;
                    let basis = PcaBasis::new(layer.clone(), k, mean, values).map_err(|e| r.error(format!("{ctx}: {e}")))?;
                    (Statistic::Pca { gram, basis: Arc::new(basis) }, nf)
                }
            }
            2 => (Statistic::Mean(MeanVector(r.f64s(n, &ctx)?)), n),
            other => return Err(r.error(format!("{ctx}: unknown statistic kind {other}"))),
        };
        entries.push(DescriptorEntry {
            layer,
            n_features,
            m,
            statistic,
        });
    }
    r.finish()?;
    Ok(TextureDescriptor { entries })
}

pub fn save_descriptor(d: &TextureDescriptor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_descriptor(d)).map_err(|e| Error::io(path, e))
}

pub fn load_descriptor(path: impl AsRef<Path>) -> Result<TextureDescriptor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_descriptor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::export_descriptor_vector;

    fn sample() -> TextureDescriptor {
        let basis = PcaBasis::new("pool1".into(), 1, vec![0.5, -0.25], vec![0.6, 0.8]).unwrap();
        TextureDescriptor {
            entries: vec![
                DescriptorEntry {
                    layer: "conv1_1".into(),
                    n_features: 2,
                    m: 16,
                    statistic: Statistic::Gram(GramMatrix::from_upper(2, &[1.0, 0.1, 3.0]).unwrap()),
                },
                DescriptorEntry {
                    layer: "pool1".into(),
                    n_features: 2,
                    m: 4,
                    statistic: Statistic::Pca {
                        gram: GramMatrix::from_upper(1, &[7.5]).unwrap(),
                        basis: Arc::new(basis),
                    },
                },
                DescriptorEntry {
                    layer: "pool2".into(),
                    n_features: 3,
                    m: 1,
                    statistic: Statistic::Mean(MeanVector(vec![1.0, f64::MIN_POSITIVE, -0.0])),
                },
            ],
        }
    }

    #[test]
    fn round_trip_bitwise() {
        let d = sample();
        let bytes = encode_descriptor(&d);
        let back = decode_descriptor(&bytes).unwrap();
        assert_eq!(encode_descriptor(&back), bytes);
        let a: Vec<u64> = export_descriptor_vector(&d).iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = export_descriptor_vector(&back).iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn gram_entry_layout() {
        let d = TextureDescriptor { entries: vec![sample().entries[0].clone()] };
        let bytes = encode_descriptor(&d);
        assert_eq!(&bytes[..8], b"GRMD0001");
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..14], &7u16.to_le_bytes());
        assert_eq!(&bytes[14..21], b"conv1_1");
        assert_eq!(bytes[21], 0);
        assert_eq!(&bytes[22..26], &2u32.to_le_bytes());
        assert_eq!(&bytes[26..30], &16u32.to_le_bytes());
        assert_eq!(&bytes[30..38], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 30 + 3 * 8);
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode_descriptor(&sample());
        assert!(decode_descriptor(&bytes[..bytes.len() - 1]).unwrap_err().to_string().contains("truncated"));
        let mut bad = bytes.clone();
        bad[3] = b'X';
        assert!(decode_descriptor(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[1, 2]);
        assert!(decode_descriptor(&extra).unwrap_err().to_string().contains("trailing"));
        let mut kind = bytes;
        kind[21] = 9;
        assert!(decode_descriptor(&kind).unwrap_err().to_string().contains("unknown statistic kind"));
    }
}
