use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkSpec};
use crate::tensor::{FeatureTensor, PoolMode};

use super::pca::{pca_fit, project_features, unproject_grad, PcaBasis};
use super::{gate, gram_loss_grad_ungated, gram_matrix, layer_loss, mean_loss, mean_loss_grad, mean_statistic, GramMatrix, MeanVector};

/// Which summary statistic a descriptor stores per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatisticKind {
    Gram,
    /// Gram matrix of the top-`k` principal components.
    Pca(usize),
    Mean,
}

impl std::str::FromStr for StatisticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gram" => Ok(StatisticKind::Gram),
            "mean" => Ok(StatisticKind::Mean),
            _ => {
                let k = s
                    .strip_prefix("pca:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0)
                    .ok_or_else(|| Error::Validation(format!("unknown statistic {s:?} (expected gram, pca:K or mean)")))?;
                Ok(StatisticKind::Pca(k))
            }
        }
    }
}

impl std::fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StatisticKind::Gram => f.write_str("gram"),
            StatisticKind::Pca(k) => write!(f, "pca:{k}"),
            StatisticKind::Mean => f.write_str("mean"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Statistic {
    Gram(GramMatrix),
    Pca { gram: GramMatrix, basis: Arc<PcaBasis> },
    Mean(MeanVector),
}

impl Statistic {
    pub fn kind(&self) -> StatisticKind {
        match self {
            Statistic::Gram(_) => StatisticKind::Gram,
            Statistic::Pca { basis, .. } => StatisticKind::Pca(basis.k),
            Statistic::Mean(_) => StatisticKind::Mean,
        }
    }

    /// Size of the stored statistic: `N_l` for gram/mean, `k` for PCA.
    pub fn size(&self) -> usize {
        match self {
            Statistic::Gram(g) => g.n(),
            Statistic::Pca { gram, .. } => gram.n(),
            Statistic::Mean(m) => m.0.len(),
        }
    }

    /// Flat parameter values: row-major upper triangle or the mean vector.
    pub fn to_vector(&self) -> Vec<f64> {
        match self {
            Statistic::Gram(g) | Statistic::Pca { gram: g, .. } => g.upper_triangle(),
            Statistic::Mean(m) => m.0.clone(),
        }
    }
}

/// One layer of a texture descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorEntry {
    pub layer: String,
    /// Feature maps in the layer (`N_l`).
    pub n_features: usize,
    /// Spatial positions per feature map (`M_l`).
    pub m: usize,
    pub statistic: Statistic,
}

impl DescriptorEntry {
    /// Computes the statistic of `features` of the same kind as `self`
    /// (reusing the PCA basis, if any).
    pub fn measure_like(&self, features: &FeatureTensor) -> Result<DescriptorEntry> {
        let statistic = match &self.statistic {
            Statistic::Gram(_) => Statistic::Gram(gram_matrix(features)),
            Statistic::Pca { basis, .. } => Statistic::Pca {
                gram: gram_matrix(&project_features(features, basis)?),
                basis: Arc::clone(basis),
            },
            Statistic::Mean(_) => Statistic::Mean(mean_statistic(features)),
        };
        Ok(DescriptorEntry {
            layer: self.layer.clone(),
            n_features: features.channels(),
            m: features.spatial_len(),
            statistic,
        })
    }

    /// Matching loss between this (target) entry and `current`.
    pub fn loss(&self, current: &DescriptorEntry) -> Result<f64> {
        match (&self.statistic, &current.statistic) {
            (Statistic::Gram(t), Statistic::Gram(c)) => layer_loss(t, c, current.statistic.size(), current.m),
            (Statistic::Pca { gram: t, .. }, Statistic::Pca { gram: c, .. }) => {
                layer_loss(t, c, current.statistic.size(), current.m)
            }
            (Statistic::Mean(t), Statistic::Mean(c)) => mean_loss(t, c),
            _ => Err(Error::Usage(format!("layer {}: statistic kinds differ", self.layer))),
        }
    }

    /// Loss of `features` against this target entry and its gradient with
    /// respect to the (rectified) features, gated where features are not
    /// positive.
    pub fn loss_and_grad(&self, features: &FeatureTensor) -> Result<(f64, FeatureTensor)> {
        let current = self.measure_like(features)?;
        let loss = self.loss(&current)?;
        let m = features.spatial_len();
        let grad = match (&self.statistic, &current.statistic) {
            (Statistic::Gram(t), Statistic::Gram(c)) => {
                gate(gram_loss_grad_ungated(features, t, c, features.channels(), m)?, features)
            }
            (Statistic::Pca { gram: t, basis }, Statistic::Pca { gram: c, .. }) => {
                let projected = project_features(features, basis)?;
                let g = gram_loss_grad_ungated(&projected, t, c, basis.k, m)?;
                gate(unproject_grad(&g, basis), features)
            }
            (Statistic::Mean(t), Statistic::Mean(c)) => mean_loss_grad(features, t, c)?,
            _ => unreachable!("measure_like preserves the kind"),
        };
        Ok((loss, grad))
    }
}

/// The per-layer statistics that fully specify a texture.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureDescriptor {
    pub entries: Vec<DescriptorEntry>,
}

impl TextureDescriptor {
    pub fn layer_names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.layer.clone()).collect()
    }

    pub fn entry(&self, layer: &str) -> Option<&DescriptorEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.iter().map(|e| parameters_for(e.statistic.kind(), e.n_features)).sum()
    }
}

/// Non-negative per-layer loss weights `w_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeighting {
    weights: Vec<(String, f64)>,
}

impl LayerWeighting {
    pub fn new(weights: Vec<(String, f64)>) -> Result<Self> {
        if let Some((name, w)) = weights.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(format!("weight for {name} must be finite and >= 0, got {w}")));
        }
        if !weights.iter().any(|(_, w)| *w > 0.0) {
            return Err(Error::Validation("at least one layer weight must be positive".into()));
        }
        Ok(Self { weights })
    }

    /// Weight 1 on every listed layer.
    pub fn uniform<S: AsRef<str>>(layers: &[S]) -> Result<Self> {
        Self::new(layers.iter().map(|l| (l.as_ref().to_string(), 1.0)).collect())
    }

    pub fn get(&self, layer: &str) -> Option<f64> {
        self.weights.iter().find(|(n, _)| n == layer).map(|(_, w)| *w)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(n, w)| (n.as_str(), *w))
    }

    /// Multiplies every weight by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|(n, w)| (n.clone(), w * factor)).collect())
    }
}

fn check_comparable(target: &TextureDescriptor, current: &TextureDescriptor) -> Result<()> {
    for i in 0..target.entries.len().max(current.entries.len()) {
        let (Some(t), Some(c)) = (target.entries.get(i), current.entries.get(i)) else {
            let name = target.entries.get(i).or(current.entries.get(i)).map(|e| e.layer.as_str()).unwrap_or("?");
            return Err(Error::Usage(format!("descriptors differ in layer set at {name}")));
        };
        let same_basis = match (&t.statistic, &c.statistic) {
            (Statistic::Pca { basis: a, .. }, Statistic::Pca { basis: b, .. }) => a.fingerprint() == b.fingerprint(),
            _ => true,
        };
        if t.layer != c.layer
            || t.statistic.kind() != c.statistic.kind()
            || t.statistic.size() != c.statistic.size()
            || t.n_features != c.n_features
            || t.m != c.m
            || !same_basis
        {
            return Err(Error::Usage(format!("descriptors are not comparable at layer {}", t.layer)));
        }
    }
    Ok(())
}

/// Per-layer losses `E_l` of `current` against `target`, in entry order.
pub fn layer_losses(target: &TextureDescriptor, current: &TextureDescriptor) -> Result<Vec<f64>> {
    check_comparable(target, current)?;
    target.entries.iter().zip(&current.entries).map(|(t, c)| t.loss(c)).collect()
}

/// `Σ_l w_l E_l`.
pub fn total_loss(target: &TextureDescriptor, current: &TextureDescriptor, weights: &LayerWeighting) -> Result<f64> {
    let losses = layer_losses(target, current)?;
    let mut total = 0.0;
    for (e, l) in target.entries.iter().zip(losses) {
        let w = weights
            .get(&e.layer)
            .ok_or_else(|| Error::Usage(format!("no weight given for layer {}", e.layer)))?;
        total += w * l;
    }
    Ok(total)
}

fn parameters_for(kind: StatisticKind, n: usize) -> usize {
    match kind {
        StatisticKind::Gram => n * (n + 1) / 2,
        StatisticKind::Pca(k) => k * (k + 1) / 2,
        StatisticKind::Mean => n,
    }
}

/// Number of matched values: `N(N+1)/2` per layer for Gram matrices,
/// `k(k+1)/2` for PCA-reduced ones, `N` for channel means.
pub fn count_parameters<S: AsRef<str>>(spec: &NetworkSpec, kind: StatisticKind, layers: &[S]) -> Result<usize> {
    let mut total = 0;
    for name in layers {
        let layer = spec.layer(name.as_ref())?;
        if let StatisticKind::Pca(k) = kind {
            if k > layer.out_channels {
                return Err(Error::Validation(format!(
                    "pca:{k} exceeds the {} feature maps of {}",
                    layer.out_channels, layer.name
                )));
            }
        }
        total += parameters_for(kind, layer.out_channels);
    }
    Ok(total)
}

/// What to measure when describing an image.
#[derive(Debug, Clone)]
pub struct DescribeConfig {
    pub layers: Vec<String>,
    pub statistic: StatisticKind,
    pub pool_mode: PoolMode,
    /// Precomputed PCA bases by layer. Layers without one get a basis
    /// fitted on the described image's own activations.
    pub pca_bases: HashMap<String, Arc<PcaBasis>>,
}

impl DescribeConfig {
    pub fn new<S: AsRef<str>>(layers: &[S], statistic: StatisticKind, pool_mode: PoolMode) -> Self {
        Self {
            layers: layers.iter().map(|l| l.as_ref().to_string()).collect(),
            statistic,
            pool_mode,
            pca_bases: HashMap::new(),
        }
    }

    /// The topmost configured layer in network order.
    pub fn top_layer(&self, spec: &NetworkSpec) -> Result<String> {
        let mut top = None;
        for l in &self.layers {
            top = top.max(Some(spec.index_of(l)?));
        }
        let top = top.ok_or_else(|| Error::Validation("no layers configured".into()))?;
        Ok(spec.layers()[top].name.clone())
    }
}

/// Passes `image` through the network and records one statistic per
/// configured layer.
pub fn describe(network: &Network, image: &FeatureTensor, config: &DescribeConfig) -> Result<TextureDescriptor> {
    let top = config.top_layer(network.spec())?;
    let acts = network.forward(image, &top, config.pool_mode)?;
    let mut entries = Vec::with_capacity(config.layers.len());
    for layer in &config.layers {
        let f = acts.get(layer).expect("forward captured every layer up to top");
        let statistic = match config.statistic {
            StatisticKind::Gram => Statistic::Gram(gram_matrix(f)),
            StatisticKind::Mean => Statistic::Mean(mean_statistic(f)),
            StatisticKind::Pca(k) => {
                let basis = match config.pca_bases.get(layer) {
                    Some(b) => {
                        if b.k != k {
                            return Err(Error::Validation(format!(
                                "basis for {layer} has k={}, statistic asks for pca:{k}",
                                b.k
                            )));
                        }
                        Arc::clone(b)
                    }
                    None => Arc::new(pca_fit(layer, std::slice::from_ref(f), k)?),
                };
                Statistic::Pca {
                    gram: gram_matrix(&project_features(f, &basis)?),
                    basis,
                }
            }
        };
        entries.push(DescriptorEntry {
            layer: layer.clone(),
            n_features: f.channels(),
            m: f.spatial_len(),
            statistic,
        });
    }
    Ok(TextureDescriptor { entries })
}

/// Concatenates every entry's parameters in layer order: the row-major
/// upper triangle (`i <= j`) of each Gram matrix, or the mean vector.
pub fn export_descriptor_vector(d: &TextureDescriptor) -> Vec<f64> {
    d.entries.iter().flat_map(|e| e.statistic.to_vector()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_vgg19_spec;

    fn gram_entry(layer: &str, upper: &[f64], n: usize, m: usize) -> DescriptorEntry {
        DescriptorEntry {
            layer: layer.into(),
            n_features: n,
            m,
            statistic: Statistic::Gram(GramMatrix::from_upper(n, upper).unwrap()),
        }
    }

    #[test]
    fn statistic_kind_parsing() {
        assert_eq!("gram".parse::<StatisticKind>().unwrap(), StatisticKind::Gram);
        assert_eq!("pca:64".parse::<StatisticKind>().unwrap(), StatisticKind::Pca(64));
        assert_eq!("mean".parse::<StatisticKind>().unwrap(), StatisticKind::Mean);
        assert!("pca:0".parse::<StatisticKind>().is_err());
        assert!("pca".parse::<StatisticKind>().is_err());
        assert_eq!(StatisticKind::Pca(3).to_string(), "pca:3");
    }

    #[test]
    fn fig3a_parameter_counts() {
        let spec = build_vgg19_spec();
        let all = spec.layers_up_to("pool4").unwrap();
        let one_per_scale = ["conv1_1", "pool1", "pool2", "pool3", "pool4"];
        assert_eq!(count_parameters(&spec, StatisticKind::Gram, &all).unwrap(), 852_128);
        assert_eq!(count_parameters(&spec, StatisticKind::Gram, &one_per_scale).unwrap(), 176_640);
        assert_eq!(count_parameters(&spec, StatisticKind::Pca(64), &one_per_scale).unwrap(), 10_400);
        assert_eq!(count_parameters(&spec, StatisticKind::Mean, &one_per_scale).unwrap(), 1_024);
        assert!(count_parameters(&spec, StatisticKind::Gram, &["fc7"]).is_err());
        assert!(count_parameters(&spec, StatisticKind::Pca(65), &["conv1_1"]).is_err());
    }

    #[test]
    fn total_loss_linearity() {
        let t = TextureDescriptor {
            entries: vec![gram_entry("a", &[1.0, 2.0, 3.0], 2, 4), gram_entry("b", &[5.0], 1, 2)],
        };
        let c = TextureDescriptor {
            entries: vec![gram_entry("a", &[0.0, 2.5, 1.0], 2, 4), gram_entry("b", &[4.0], 1, 2)],
        };
        let w = LayerWeighting::uniform(&["a", "b"]).unwrap();
        assert_eq!(total_loss(&t, &t, &w).unwrap(), 0.0);

        let losses = layer_losses(&t, &c).unwrap();
        let only_b = LayerWeighting::new(vec![("a".into(), 0.0), ("b".into(), 1.0)]).unwrap();
        assert_eq!(total_loss(&t, &c, &only_b).unwrap(), losses[1]);
        assert_eq!(
            total_loss(&t, &c, &w.scaled(2.0).unwrap()).unwrap(),
            2.0 * total_loss(&t, &c, &w).unwrap()
        );
    }

    #[test]
    fn total_loss_mismatch_names_layer() {
        let t = TextureDescriptor {
            entries: vec![gram_entry("a", &[1.0], 1, 4), gram_entry("b", &[5.0], 1, 2)],
        };
        let c = TextureDescriptor {
            entries: vec![gram_entry("a", &[1.0], 1, 4), gram_entry("b", &[5.0], 1, 8)],
        };
        let w = LayerWeighting::uniform(&["a", "b"]).unwrap();
        let err = total_loss(&t, &c, &w).unwrap_err();
        assert!(matches!(err, Error::Usage(ref m) if m.contains("layer b")), "{err}");

        let short = TextureDescriptor { entries: vec![gram_entry("a", &[1.0], 1, 4)] };
        assert!(total_loss(&t, &short, &w).is_err());
        let missing = LayerWeighting::uniform(&["a"]).unwrap();
        assert!(total_loss(&t, &t, &missing).is_err());
    }

    #[test]
    fn weighting_validation() {
        assert!(LayerWeighting::new(vec![("a".into(), 0.0)]).is_err());
        assert!(LayerWeighting::new(vec![("a".into(), -1.0), ("b".into(), 1.0)]).is_err());
        assert!(LayerWeighting::new(vec![("a".into(), f64::NAN)]).is_err());
    }

    #[test]
    fn export_single_gram() {
        let d = TextureDescriptor { entries: vec![gram_entry("a", &[14.0], 1, 3)] };
        assert_eq!(export_descriptor_vector(&d), vec![14.0]);
    }
}
