use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;
use crate::weights::Reader;

/// Top-`k` principal directions of one layer's feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub layer: String,
    pub k: usize,
    /// Per-feature centering vector, length `N_l`.
    pub mean: Vec<f64>,
    /// `k × N_l`, orthonormal rows in order of decreasing variance.
    pub basis: Vec<f64>,
}

impl PcaBasis {
    pub fn new(layer: String, k: usize, mean: Vec<f64>, basis: Vec<f64>) -> Result<Self> {
        if k == 0 || k > mean.len() || basis.len() != k * mean.len() {
            return Err(Error::Dimension(format!(
                "PCA basis for {layer}: k={k}, {} features, {} basis values",
                mean.len(),
                basis.len()
            )));
        }
        Ok(Self { layer, k, mean, basis })
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.n_features();
        &self.basis[r * n..(r + 1) * n]
    }

    /// FNV-1a hash over the layer name, `k` and the exact bits of all
    /// values; identifies which basis a descriptor was built with.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(self.layer.as_bytes());
        feed(&(self.k as u64).to_le_bytes());
        for v in self.mean.iter().chain(&self.basis) {
            feed(&v.to_bits().to_le_bytes());
        }
        h
    }
}

/// Fits a `k`-component PCA to the feature vectors at every position of
/// every sample tensor. Covariance is normalized by the sample count;
/// each basis row's largest-magnitude component is made positive.
pub fn pca_fit(layer: &str, samples: &[FeatureTensor], k: usize) -> Result<PcaBasis> {
    let Some(first) = samples.first() else {
        return Err(Error::Validation(format!("PCA for {layer}: no samples")));
    };
    let n = first.channels();
    if samples.iter().any(|s| s.channels() != n) {
        return Err(Error::Dimension(format!("PCA for {layer}: samples disagree on channel count")));
    }
    if k == 0 || k > n {
        return Err(Error::Validation(format!("PCA for {layer}: k={k} must be in 1..={n}")));
    }
    let total: usize = samples.iter().map(|s| s.spatial_len()).sum();
    if total < n {
        return Err(Error::Validation(format!(
            "PCA for {layer}: {total} sample positions, need at least {n}"
        )));
    }

    let mut mean = vec![0.0; n];
    for s in samples {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += s.plane(c).iter().sum::<f64>();
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(n, n);
    for s in samples {
        let centered: Vec<Vec<f64>> = (0..n)
            .map(|c| s.plane(c).iter().map(|v| v - mean[c]).collect())
            .collect();
        for i in 0..n {
            for j in i..n {
                let d: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                cov[(i, j)] += d;
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / total as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let largest = eig.eigenvalues[order[0]].max(0.0);
    let tol = largest * n as f64 * 1e-12;
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol && largest > 0.0).count();
    if rank < k {
        return Err(Error::RankDeficient {
            layer: layer.to_string(),
            rank,
            requested: k,
        });
    }

    let mut basis = Vec::with_capacity(k * n);
    for &col in &order[..k] {
        let v = eig.eigenvectors.column(col);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        basis.extend(v.iter().map(|x| sign * x));
    }
    PcaBasis::new(layer.to_string(), k, mean, basis)
}

/// `P = B (F − μ 1ᵀ)`: projects centered features onto the basis rows.
pub fn project_features(features: &FeatureTensor, basis: &PcaBasis) -> Result<FeatureTensor> {
    let n = basis.n_features();
    if features.channels() != n {
        return Err(Error::Dimension(format!(
            "basis for {} expects {n} channels, got {}",
            basis.layer,
            features.channels()
        )));
    }
    let m = features.spatial_len();
    let mut out = FeatureTensor::zeros(basis.k, features.height(), features.width());
    for r in 0..basis.k {
        let row = basis.row(r);
        let dst = out.plane_mut(r);
        for c in 0..n {
            let b = row[c];
            let mu = basis.mean[c];
            for (o, &f) in dst.iter_mut().zip(features.plane(c)) {
                *o += b * (f - mu);
            }
        }
        debug_assert_eq!(dst.len(), m);
    }
    Ok(out)
}

/// Pulls a gradient with respect to the projection back to the features:
/// `Bᵀ · grad` (the centering is constant).
pub(crate) fn unproject_grad(grad: &FeatureTensor, basis: &PcaBasis) -> FeatureTensor {
    let n = basis.n_features();
    let mut out = FeatureTensor::zeros(n, grad.height(), grad.width());
    for r in 0..basis.k {
        let row = basis.row(r);
        let src = grad.plane(r);
        for (c, &b) in row.iter().enumerate() {
            if b != 0.0 {
                for (o, &g) in out.plane_mut(c).iter_mut().zip(src) {
                    *o += b * g;
                }
            }
        }
    }
    out
}

pub const PCA_MAGIC: &[u8; 8] = b"PCAB0001";

/// Serializes bases as: magic, `u32` count, then per basis a `u16`-prefixed
/// layer name, `u32 k`, `u32 N_l`, `N_l` `f64` centering values and
/// `k × N_l` `f64` basis values (little-endian).
pub fn encode_pca_bases(bases: &[PcaBasis]) -> Vec<u8> {
    let mut buf = PCA_MAGIC.to_vec();
    buf.extend_from_slice(&(bases.len() as u32).to_le_bytes());
    for b in bases {
        buf.extend_from_slice(&(b.layer.len() as u16).to_le_bytes());
        buf.extend_from_slice(b.layer.as_bytes());
        buf.extend_from_slice(&(b.k as u32).to_le_bytes());
        buf.extend_from_slice(&(b.n_features() as u32).to_le_bytes());
        for v in b.mean.iter().chain(&b.basis) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_pca_bases(bytes: &[u8]) -> Result<Vec<PcaBasis>> {
    let mut r = Reader::new(bytes, "PCA basis file");
    r.expect_magic(PCA_MAGIC)?;
    let count = r.u32("basis count")? as usize;
    let mut out = Vec::new();
    for _ in 0..count {
        let layer = r.name("basis name")?;
        let ctx = format!("basis {layer}");
        let k = r.u32(&ctx)? as usize;
        let n = r.u32(&ctx)? as usize;
        let mean = r.f64s(n, &ctx)?;
        let values = r.f64s(k * n, &ctx)?;
        out.push(PcaBasis::new(layer, k, mean, values).map_err(|e| r.error(e.to_string()))?);
    }
    r.finish()?;
    Ok(out)
}

pub fn save_pca_bases(bases: &[PcaBasis], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pca_bases(bases)).map_err(|e| Error::io(path, e))
}

pub fn load_pca_bases(path: impl AsRef<Path>) -> Result<Vec<PcaBasis>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pca_bases(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centering_gives_zero_projection() {
        let f = FeatureTensor::from_fn(3, 2, 2, |c, _, _| c as f64 + 1.0);
        let basis = PcaBasis::new("l".into(), 2, vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 0.0, 0.0, 0.6, 0.8]).unwrap();
        let p = project_features(&f, &basis).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(project_features(&FeatureTensor::zeros(2, 1, 1), &basis).is_err());
    }

    #[test]
    fn identity_basis_is_identity() {
        let f = FeatureTensor::from_fn(2, 2, 3, |c, y, x| (c * 6 + y * 3 + x) as f64 - 4.0);
        let basis = PcaBasis::new("l".into(), 2, vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(project_features(&f, &basis).unwrap(), f);
    }

    #[test]
    fn rejects_bad_requests() {
        let f = FeatureTensor::from_fn(3, 1, 2, |c, _, x| (c + x) as f64);
        assert!(matches!(pca_fit("l", &[f.clone()], 2), Err(Error::Validation(_))));
        let f = FeatureTensor::from_fn(3, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f64);
        assert!(matches!(pca_fit("l", &[f.clone()], 4), Err(Error::Validation(_))));
        assert!(pca_fit("l", &[], 1).is_err());
        // Every channel is an affine function of the same ramp: rank one.
        match pca_fit("l", &[f], 2) {
            Err(Error::RankDeficient { rank, requested, .. }) => assert_eq!((rank, requested), (1, 2)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fingerprint_tracks_values() {
        let a = PcaBasis::new("l".into(), 1, vec![0.0, 0.0], vec![1.0, 0.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.mean[1] = 1e-300;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn basis_file_round_trip() {
        let a = PcaBasis::new("pool2".into(), 1, vec![0.5, -0.25], vec![0.6, 0.8]).unwrap();
        let b = PcaBasis::new("conv1_1".into(), 2, vec![1.0, 2.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = encode_pca_bases(&[a.clone(), b.clone()]);
        assert_eq!(decode_pca_bases(&bytes).unwrap(), vec![a, b]);
        assert!(decode_pca_bases(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_pca_bases(b"PCAB0002\0\0\0\0").is_err());
    }
}
