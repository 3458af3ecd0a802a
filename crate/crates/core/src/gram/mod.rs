//! The texture model: Gram matrices of feature maps, the per-layer matching
//! losses and their gradients with respect to the layer activations, plus
//! the reduced statistics (PCA-projected Gram, channel means).

mod descriptor;
mod file;
mod pca;

pub use descriptor::{
    count_parameters, describe, export_descriptor_vector, layer_losses, total_loss, DescribeConfig,
    DescriptorEntry, LayerWeighting, Statistic, StatisticKind, TextureDescriptor,
};
pub use file::{decode_descriptor, encode_descriptor, load_descriptor, save_descriptor, DESCRIPTOR_MAGIC};
pub use pca::{
    decode_pca_bases, encode_pca_bases, load_pca_bases, pca_fit, project_features, save_pca_bases, PcaBasis, PCA_MAGIC,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;

/// Symmetric `n × n` matrix of feature-map inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    /// Builds from the row-major upper triangle (`i <= j`), mirroring it.
    pub fn from_upper(n: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::Dimension(format!(
                "upper triangle of a {n}x{n} matrix has {} entries, got {}",
                n * (n + 1) / 2,
                upper.len()
            )));
        }
        let mut values = vec![0.0; n * n];
        let mut it = upper.iter();
        for i in 0..n {
            for j in i..n {
                let v = *it.next().expect("length checked");
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n + 1) / 2);
        for i in 0..self.n {
            out.extend_from_slice(&self.values[i * self.n + i..(i + 1) * self.n]);
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            n: self.n,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

/// `G[i][j] = Σ_k F[i][k] F[j][k]` over all spatial positions `k`.
pub fn gram_matrix(features: &FeatureTensor) -> GramMatrix {
    let n = features.channels();
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = features.plane(i);
            (i..n)
                .map(|j| fi.iter().zip(features.plane(j)).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            values[i * n + i + off] = v;
            values[(i + off) * n + i] = v;
        }
    }
    GramMatrix { n, values }
}

/// `E = 1/(4 N² M²) Σ_ij (G_ij − Ĝ_ij)²`.
pub fn layer_loss(target: &GramMatrix, current: &GramMatrix, n: usize, m: usize) -> Result<f64> {
    if target.n != n || current.n != n {
        return Err(Error::Dimension(format!(
            "layer loss expects {n}x{n} Gram matrices, got {}x{} and {}x{}",
            target.n, target.n, current.n, current.n
        )));
    }
    let sq: f64 = target
        .values
        .iter()
        .zip(&current.values)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let (n, m) = (n as f64, m as f64);
    Ok(sq / (4.0 * n * n * m * m))
}

/// Gradient of [`layer_loss`] with respect to the features that produced
/// `current`, without any rectification gate:
/// `(1/(N² M²)) (Ĝ − G) F̂`.
pub(crate) fn gram_loss_grad_ungated(
    features: &FeatureTensor,
    target: &GramMatrix,
    current: &GramMatrix,
    n: usize,
    m: usize,
) -> Result<FeatureTensor> {
    let rows = features.channels();
    if target.n != rows || current.n != rows {
        return Err(Error::Dimension(format!(
            "gradient needs {rows}x{rows} Gram matrices, got {}x{} and {}x{}",
            target.n, target.n, current.n, current.n
        )));
    }
    let norm = 1.0 / ((n as f64).powi(2) * (m as f64).powi(2));
    let len = features.spatial_len();
    let mut out = FeatureTensor::zeros(rows, features.height(), features.width());
    if len == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(len)
        .enumerate()
        .for_each(|(i, row)| {
            for j in 0..rows {
                let d = norm * (current.get(i, j) - target.get(i, j));
                if d != 0.0 {
                    for (o, f) in row.iter_mut().zip(features.plane(j)) {
                        *o += d * f;
                    }
                }
            }
        });
    Ok(out)
}

/// Zeroes `grad` wherever the rectified activation is not positive.
pub(crate) fn gate(mut grad: FeatureTensor, activation: &FeatureTensor) -> FeatureTensor {
    for (g, &a) in grad.data_mut().iter_mut().zip(activation.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
    grad
}

/// Descent gradient of [`layer_loss`] with respect to the (rectified)
/// activations `F̂`: `(1/(N² M²)) ((Ĝ − G) F̂)`, zero wherever `F̂ <= 0`.
///
/// This is the analytic derivative of the loss; note it pulls out
/// `Ĝ − G` rather than `G − Ĝ`.
pub fn layer_loss_grad(
    features: &FeatureTensor,
    target: &GramMatrix,
    current: &GramMatrix,
    n: usize,
    m: usize,
) -> Result<FeatureTensor> {
    if features.channels() != n || features.spatial_len() != m {
        return Err(Error::Dimension(format!(
            "features are {}x{}, expected {n}x{m}",
            features.channels(),
            features.spatial_len()
        )));
    }
    Ok(gate(gram_loss_grad_ungated(features, target, current, n, m)?, features))
}

/// Per-channel mean over spatial positions.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVector(pub Vec<f64>);

pub fn mean_statistic(features: &FeatureTensor) -> MeanVector {
    let m = features.spatial_len() as f64;
    MeanVector(
        (0..features.channels())
            .map(|c| features.plane(c).iter().sum::<f64>() / m)
            .collect(),
    )
}

/// `E = 1/(4 N) Σ_i (μ_i − μ̂_i)²`.
pub fn mean_loss(target: &MeanVector, current: &MeanVector) -> Result<f64> {
    if target.0.len() != current.0.len() || target.0.is_empty() {
        return Err(Error::Dimension(format!(
            "mean vectors have lengths {} and {}",
            target.0.len(),
            current.0.len()
        )));
    }
    let sq: f64 = target.0.iter().zip(&current.0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (4.0 * target.0.len() as f64))
}

/// Gradient of [`mean_loss`] with respect to the activations:
/// `(μ̂_i − μ_i) / (2 N M)` at every position of channel `i`, gated by `F̂ > 0`.
pub fn mean_loss_grad(features: &FeatureTensor, target: &MeanVector, current: &MeanVector) -> Result<FeatureTensor> {
    let n = features.channels();
    if target.0.len() != n || current.0.len() != n {
        return Err(Error::Dimension(format!(
            "mean vectors must have {n} entries, got {} and {}",
            target.0.len(),
            current.0.len()
        )));
    }
    let m = features.spatial_len();
    let mut out = FeatureTensor::zeros(n, features.height(), features.width());
    for c in 0..n {
        let d = (current.0[c] - target.0[c]) / (2.0 * n as f64 * m as f64);
        out.plane_mut(c).fill(d);
    }
    Ok(gate(out, features))
}
