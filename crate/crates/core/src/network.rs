//! Sequential convolutional trunks: layer specs, forward pass with
//! activation capture, gradient pull-back to pixels, unit-mean weight
//! rescaling and seeded random initialization.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    conv3x3_backward_input, conv3x3_forward, pool2x2_backward, pool2x2_forward, relu_backward,
    relu_forward, ConvWeights, FeatureTensor, PoolContext, PoolMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 convolution followed by rectification.
    ConvRelu,
    /// 2×2 non-overlapping pooling; the mode is chosen per run.
    Pool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn conv(name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::ConvRelu,
            in_channels,
            out_channels,
        }
    }

    pub fn pool(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Pool,
            in_channels: channels,
            out_channels: channels,
        }
    }
}

/// Ordered layer list with a consistent channel chain starting from RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network spec has no layers".into()));
        }
        let mut seen = HashSet::new();
        let mut channels = 3;
        for layer in &layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Validation(format!("duplicate layer name {:?}", layer.name)));
            }
            if layer.in_channels != channels {
                return Err(Error::Validation(format!(
                    "layer {} reads {} channels but the previous layer produces {channels}",
                    layer.name, layer.in_channels
                )));
            }
            if layer.kind == LayerKind::Pool && layer.out_channels != layer.in_channels {
                return Err(Error::Validation(format!(
                    "pool layer {} must preserve its channel count",
                    layer.name
                )));
            }
            if layer.out_channels == 0 {
                return Err(Error::Validation(format!("layer {} has no channels", layer.name)));
            }
            channels = layer.out_channels;
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Validation(format!("unknown layer {name:?}")))
    }

    pub fn layer(&self, name: &str) -> Result<&LayerSpec> {
        Ok(&self.layers[self.index_of(name)?])
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::ConvRelu)
    }

    /// Names of every layer up to and including `name`.
    pub fn layers_up_to(&self, name: &str) -> Result<Vec<String>> {
        let top = self.index_of(name)?;
        Ok(self.layers[..=top].iter().map(|l| l.name.clone()).collect())
    }

    /// Number of pooling layers at or below layer index `top`.
    pub fn pools_through(&self, top: usize) -> usize {
        self.layers[..=top]
            .iter()
            .filter(|l| l.kind == LayerKind::Pool)
            .count()
    }

    /// Checks that an `height × width` input survives every pooling layer
    /// up to `top` without odd sizes.
    pub fn check_input_dims(&self, top: usize, height: usize, width: usize) -> Result<()> {
        let factor = 1usize << self.pools_through(top);
        if height == 0 || width == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::Validation(format!(
                "input {height}x{width} must be a positive multiple of {factor} in each dimension \
                 to pass the {} pooling layer(s) up to {}",
                self.pools_through(top),
                self.layers[top].name
            )));
        }
        Ok(())
    }

    /// Spatial size of layer `index`'s output for an input of the given size.
    pub fn output_dims(&self, index: usize, height: usize, width: usize) -> (usize, usize, usize) {
        let shift = self.pools_through(index);
        (self.layers[index].out_channels, height >> shift, width >> shift)
    }
}

/// The VGG-19 convolutional trunk: 16 conv+ReLU layers and 5 pooling layers,
/// no fully connected layers.
pub fn build_vgg19_spec() -> NetworkSpec {
    let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];
    let mut layers = Vec::with_capacity(21);
    let mut channels = 3;
    for (b, &(convs, width)) in blocks.iter().enumerate() {
        for i in 0..convs {
            layers.push(LayerSpec::conv(&format!("conv{}_{}", b + 1, i + 1), channels, width));
            channels = width;
        }
        layers.push(LayerSpec::pool(&format!("pool{}", b + 1), channels));
    }
    NetworkSpec::new(layers).expect("VGG-19 spec is consistent")
}

/// A small trunk (two conv layers with 8 and 16 filters, one pool) used by
/// gradient checks and regression tests.
pub fn tiny_spec() -> NetworkSpec {
    NetworkSpec::new(vec![
        LayerSpec::conv("conv1_1", 3, 8),
        LayerSpec::conv("conv1_2", 8, 16),
        LayerSpec::pool("pool1", 16),
    ])
    .expect("tiny spec is consistent")
}

/// A network spec plus weights for every conv layer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    /// One entry per spec layer; `None` for pooling layers.
    weights: Vec<Option<ConvWeights>>,
}

/// Activations captured by [`Network::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub(crate) pool_mode: PoolMode,
    pub(crate) input_shape: (usize, usize, usize),
    pub(crate) layers: Vec<LayerActivation>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerActivation {
    pub(crate) name: String,
    pub(crate) output: FeatureTensor,
    pub(crate) cache: ActivationCache,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum ActivationCache {
    Conv { preactivation: FeatureTensor },
    Pool { context: PoolContext },
}

impl ActivationSet {
    pub fn get(&self, name: &str) -> Option<&FeatureTensor> {
        self.layers.iter().find(|l| l.name == name).map(|l| &l.output)
    }

    pub fn preactivation(&self, name: &str) -> Option<&FeatureTensor> {
        self.layers.iter().find(|l| l.name == name).and_then(|l| match &l.cache {
            ActivationCache::Conv { preactivation } => Some(preactivation),
            ActivationCache::Pool { .. } => None,
        })
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn pool_mode(&self) -> PoolMode {
        self.pool_mode
    }
}

impl Network {
    /// Pairs a spec with weights listed in conv-layer order.
    pub fn new(spec: NetworkSpec, conv_weights: Vec<ConvWeights>) -> Result<Self> {
        let n_conv = spec.conv_layers().count();
        if conv_weights.len() != n_conv {
            return Err(Error::Validation(format!(
                "spec has {n_conv} conv layers but {} weight blocks were given",
                conv_weights.len()
            )));
        }
        let mut it = conv_weights.into_iter();
        let mut weights = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            match layer.kind {
                LayerKind::Pool => weights.push(None),
                LayerKind::ConvRelu => {
                    let w = it.next().expect("counted above");
                    if w.out_channels() != layer.out_channels || w.in_channels() != layer.in_channels {
                        return Err(Error::Validation(format!(
                            "layer {}: weights are {}x{}x3x3 but the spec needs {}x{}x3x3",
                            layer.name,
                            w.out_channels(),
                            w.in_channels(),
                            layer.out_channels,
                            layer.in_channels
                        )));
                    }
                    weights.push(Some(w));
                }
            }
        }
        Ok(Self { spec, weights })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self, name: &str) -> Result<&ConvWeights> {
        let i = self.spec.index_of(name)?;
        self.weights[i]
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("layer {name} has no weights")))
    }

    /// Conv weights in spec order, paired with their layer specs.
    pub fn conv_weights(&self) -> impl Iterator<Item = (&LayerSpec, &ConvWeights)> {
        self.spec
            .layers
            .iter()
            .zip(&self.weights)
            .filter_map(|(l, w)| w.as_ref().map(|w| (l, w)))
    }

    pub fn into_conv_weights(self) -> Vec<ConvWeights> {
        self.weights.into_iter().flatten().collect()
    }

    /// Runs the trunk on a preprocessed `3 × H × W` image, keeping every
    /// activation up to and including `up_to`.
    pub fn forward(&self, image: &FeatureTensor, up_to: &str, pool_mode: PoolMode) -> Result<ActivationSet> {
        let top = self.spec.index_of(up_to)?;
        if image.channels() != 3 {
            return Err(Error::Dimension(format!(
                "network input must have 3 channels, got {}",
                image.channels()
            )));
        }
        self.spec.check_input_dims(top, image.height(), image.width())?;

        let mut layers: Vec<LayerActivation> = Vec::with_capacity(top + 1);
        for (i, layer) in self.spec.layers[..=top].iter().enumerate() {
            let input = layers.last().map(|l| &l.output).unwrap_or(image);
            let act = match layer.kind {
                LayerKind::ConvRelu => {
                    let w = self.weights[i].as_ref().expect("conv layer has weights");
                    let pre = conv3x3_forward(input, w)?;
                    LayerActivation {
                        name: layer.name.clone(),
                        output: relu_forward(&pre),
                        cache: ActivationCache::Conv { preactivation: pre },
                    }
                }
                LayerKind::Pool => {
                    let (out, ctx) = pool2x2_forward(input, pool_mode)?;
                    LayerActivation {
                        name: layer.name.clone(),
                        output: out,
                        cache: ActivationCache::Pool { context: ctx },
                    }
                }
            };
            layers.push(act);
        }
        Ok(ActivationSet {
            pool_mode,
            input_shape: image.shape(),
            layers,
        })
    }

    /// Back-propagates gradients injected at any captured layers down to the
    /// input pixels. Each injected term joins the running gradient as the
    /// sweep passes its layer.
    pub fn backward_to_pixels(
        &self,
        acts: &ActivationSet,
        injected: &HashMap<String, FeatureTensor>,
    ) -> Result<FeatureTensor> {
        let mut top = None;
        for (name, grad) in injected {
            let idx = acts
                .layers
                .iter()
                .position(|l| &l.name == name)
                .ok_or_else(|| Error::Usage(format!("gradient injected at {name}, which was not computed")))?;
            if !grad.same_shape(&acts.layers[idx].output) {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has shape {:?}, activation is {:?}",
                    grad.shape(),
                    acts.layers[idx].output.shape()
                )));
            }
            top = top.max(Some(idx));
        }
        let (c, h, w) = acts.input_shape;
        let Some(top) = top else {
            return Ok(FeatureTensor::zeros(c, h, w));
        };

        let mut grad: Option<FeatureTensor> = None;
        for i in (0..=top).rev() {
            let layer = &acts.layers[i];
            if let Some(g) = injected.get(&layer.name) {
                match grad.as_mut() {
                    Some(acc) => acc.axpy(1.0, g)?,
                    None => grad = Some(g.clone()),
                }
            }
            let Some(g) = grad.take() else { continue };
            let below = match &layer.cache {
                ActivationCache::Conv { preactivation } => {
                    let gated = relu_backward(&g, preactivation)?;
                    let weights = self.weights[i].as_ref().expect("conv layer has weights");
                    conv3x3_backward_input(&gated, weights)?
                }
                ActivationCache::Pool { context } => pool2x2_backward(&g, context, acts.pool_mode)?,
            };
            grad = Some(below);
        }
        Ok(grad.unwrap_or_else(|| FeatureTensor::zeros(c, h, w)))
    }

    /// Rescales filters so that each conv filter's mean post-ReLU activation
    /// over the calibration images and all positions equals one, compensating
    /// in the next conv layer so that the network function above is unchanged.
    ///
    /// Layers are processed bottom-up; each layer is measured with all
    /// earlier layers already rescaled.
    pub fn rescale_weights(&self, calibration: &[FeatureTensor], pool_mode: PoolMode) -> Result<Network> {
        const DEAD: f64 = 1e-12;
        if calibration.is_empty() {
            return Err(Error::Validation("rescaling needs at least one calibration image".into()));
        }
        let last = self.spec.layers.len() - 1;
        for img in calibration {
            if img.channels() != 3 {
                return Err(Error::Dimension("calibration images must have 3 channels".into()));
            }
            self.spec.check_input_dims(last, img.height(), img.width())?;
        }

        let mut weights = self.weights.clone();
        let mut current: Vec<FeatureTensor> = calibration.to_vec();
        for i in 0..self.spec.layers.len() {
            let layer = &self.spec.layers[i];
            if layer.kind == LayerKind::Pool {
                for t in &mut current {
                    *t = pool2x2_forward(t, pool_mode)?.0;
                }
                continue;
            }

            let w = weights[i].as_ref().expect("conv layer has weights");
            let means = channel_means(current.iter().map(|t| conv3x3_forward(t, w).map(|p| relu_forward(&p))))?;
            let dead: Vec<String> = means
                .iter()
                .enumerate()
                .filter(|(_, &m)| !(m > DEAD))
                .map(|(f, m)| format!("{}[{f}] (mean {m:e})", layer.name))
                .collect();
            if !dead.is_empty() {
                return Err(Error::DeadFilters {
                    threshold: DEAD,
                    filters: dead,
                });
            }

            let w = weights[i].as_mut().expect("conv layer has weights");
            for (o, &a) in means.iter().enumerate() {
                for c in 0..w.in_channels() {
                    for v in w.taps_mut(o, c) {
                        *v /= a;
                    }
                }
                w.bias_mut()[o] /= a;
            }
            if let Some(next) = (i + 1..self.spec.layers.len()).find(|&j| self.spec.layers[j].kind == LayerKind::ConvRelu) {
                let nw = weights[next].as_mut().expect("conv layer has weights");
                for o in 0..nw.out_channels() {
                    for (c, &a) in means.iter().enumerate() {
                        for v in nw.taps_mut(o, c) {
                            *v *= a;
                        }
                    }
                }
            }

            let w = weights[i].as_ref().expect("conv layer has weights");
            for t in &mut current {
                *t = relu_forward(&conv3x3_forward(t, w)?);
            }
        }
        Ok(Network {
            spec: self.spec.clone(),
            weights,
        })
    }

    /// Per-filter mean post-ReLU activation of every conv layer over the
    /// given images and all positions.
    pub fn mean_activations(
        &self,
        images: &[FeatureTensor],
        pool_mode: PoolMode,
    ) -> Result<Vec<(String, Vec<f64>)>> {
        let last = &self.spec.layers[self.spec.layers.len() - 1].name;
        let sets = images
            .iter()
            .map(|img| self.forward(img, last, pool_mode))
            .collect::<Result<Vec<_>>>()?;
        self.conv_weights()
            .map(|(layer, _)| {
                let means = channel_means(sets.iter().map(|s| Ok(s.get(&layer.name).expect("captured").clone())))?;
                Ok((layer.name.clone(), means))
            })
            .collect()
    }
}

/// Mean of each channel over all positions of all tensors.
fn channel_means(tensors: impl Iterator<Item = Result<FeatureTensor>>) -> Result<Vec<f64>> {
    let mut sums: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for t in tensors {
        let t = t?;
        if sums.is_empty() {
            sums = vec![0.0; t.channels()];
        }
        for (c, s) in sums.iter_mut().enumerate() {
            *s += t.plane(c).iter().sum::<f64>();
        }
        count += t.spatial_len();
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

/// Seeded random weights: i.i.d. `N(0, scale²)` kernel taps rounded to
/// single precision (so they survive a weight-file round trip exactly) and
/// zero biases.
pub fn random_init(spec: &NetworkSpec, seed: u64, scale: f64) -> Result<Network> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Validation(format!("random init scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, scale).map_err(|e| Error::Validation(e.to_string()))?;
    let weights = spec
        .conv_layers()
        .map(|l| {
            let kernel = (0..l.out_channels * l.in_channels * 9)
                .map(|_| normal.sample(&mut rng) as f32 as f64)
                .collect();
            ConvWeights::new(l.out_channels, l.in_channels, kernel, vec![0.0; l.out_channels])
        })
        .collect::<Result<Vec<_>>>()?;
    Network::new(spec.clone(), weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg19_shape() {
        let spec = build_vgg19_spec();
        assert_eq!(spec.layers().len(), 21);
        assert_eq!(spec.conv_layers().count(), 16);
        assert_eq!(spec.layers().iter().filter(|l| l.kind == LayerKind::Pool).count(), 5);
        assert_eq!(spec.layer("conv1_1").unwrap().out_channels, 64);
        assert_eq!(spec.layer("conv4_1").unwrap().out_channels, 512);
        let pool1 = spec.layer("pool1").unwrap();
        assert_eq!((pool1.in_channels, pool1.out_channels), (64, 64));
        assert_eq!(spec.layers().last().unwrap().name, "pool5");
        let names: Vec<_> = spec.layers().iter().map(|l| l.name.as_str()).collect();
        assert_eq!(&names[..4], &["conv1_1", "conv1_2", "pool1", "conv2_1"]);
        assert_eq!(names[16], "conv5_1");
    }

    #[test]
    fn channel_doubling_after_first_three_pools() {
        let spec = build_vgg19_spec();
        let widths: Vec<usize> = ["pool1", "pool2", "pool3", "pool4"]
            .iter()
            .map(|p| spec.layer(p).unwrap().out_channels)
            .collect();
        assert_eq!(widths, vec![64, 128, 256, 512]);
    }

    #[test]
    fn spec_validation() {
        let dup = NetworkSpec::new(vec![LayerSpec::conv("a", 3, 4), LayerSpec::conv("a", 4, 4)]);
        assert!(matches!(dup, Err(Error::Validation(_))));
        let chain = NetworkSpec::new(vec![LayerSpec::conv("a", 3, 4), LayerSpec::conv("b", 5, 4)]);
        assert!(matches!(chain, Err(Error::Validation(_))));
        let rgb = NetworkSpec::new(vec![LayerSpec::conv("a", 1, 4)]);
        assert!(matches!(rgb, Err(Error::Validation(_))));
    }

    #[test]
    fn layers_up_to_and_dims() {
        let spec = build_vgg19_spec();
        assert_eq!(spec.layers_up_to("pool1").unwrap(), vec!["conv1_1", "conv1_2", "pool1"]);
        assert_eq!(spec.layers_up_to("pool4").unwrap().len(), 16);
        let top = spec.index_of("pool4").unwrap();
        assert_eq!(spec.output_dims(top, 64, 64), (512, 4, 4));
        assert!(spec.check_input_dims(top, 64, 48).is_ok());
        assert!(spec.check_input_dims(top, 64, 40).is_err());
        assert!(spec.layers_up_to("fc6").is_err());
    }

    #[test]
    fn forward_zero_image_zero_bias() {
        let net = random_init(&tiny_spec(), 3, 0.5).unwrap();
        let acts = net.forward(&FeatureTensor::zeros(3, 8, 8), "pool1", PoolMode::Avg).unwrap();
        assert_eq!(acts.len(), 3);
        for name in ["conv1_1", "conv1_2", "pool1"] {
            assert!(acts.get(name).unwrap().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_stops_at_requested_layer() {
        let net = random_init(&tiny_spec(), 3, 0.5).unwrap();
        let img = FeatureTensor::filled(3, 6, 6, 1.0);
        let acts = net.forward(&img, "conv1_2", PoolMode::Max).unwrap();
        assert_eq!(acts.layer_names().collect::<Vec<_>>(), vec!["conv1_1", "conv1_2"]);
        assert!(acts.get("pool1").is_none());
        assert!(matches!(net.forward(&img, "pool9", PoolMode::Avg), Err(Error::Validation(_))));
        let odd = FeatureTensor::filled(3, 7, 6, 1.0);
        assert!(matches!(net.forward(&odd, "pool1", PoolMode::Avg), Err(Error::Validation(_))));
    }

    #[test]
    fn backward_rejects_unknown_injection() {
        let net = random_init(&tiny_spec(), 3, 0.5).unwrap();
        let img = FeatureTensor::filled(3, 4, 4, 1.0);
        let acts = net.forward(&img, "conv1_2", PoolMode::Avg).unwrap();
        let mut inj = HashMap::new();
        inj.insert("pool1".to_string(), FeatureTensor::zeros(16, 2, 2));
        assert!(matches!(net.backward_to_pixels(&acts, &inj), Err(Error::Usage(_))));
        let mut inj = HashMap::new();
        inj.insert("conv1_1".to_string(), FeatureTensor::zeros(8, 2, 2));
        assert!(matches!(net.backward_to_pixels(&acts, &inj), Err(Error::Dimension(_))));
        let mut inj = HashMap::new();
        inj.insert("conv1_1".to_string(), FeatureTensor::zeros(8, 4, 4));
        let g = net.backward_to_pixels(&acts, &inj).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_init_determinism() {
        let a = random_init(&tiny_spec(), 11, 0.1).unwrap();
        let b = random_init(&tiny_spec(), 11, 0.1).unwrap();
        let c = random_init(&tiny_spec(), 12, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.conv_weights().all(|(_, w)| w.bias().iter().all(|&b| b == 0.0)));
        assert!(random_init(&tiny_spec(), 0, 0.0).is_err());
    }

    #[test]
    fn network_rejects_mismatched_weights() {
        let spec = tiny_spec();
        let err = Network::new(spec.clone(), vec![ConvWeights::zeros(8, 3), ConvWeights::zeros(16, 9)]).unwrap_err();
        assert!(err.to_string().contains("conv1_2"));
        assert!(Network::new(spec, vec![ConvWeights::zeros(8, 3)]).is_err());
    }

    #[test]
    fn rescale_toy_network_scale_factors() {
        // Center-tap-only kernels on a constant image give constant activations:
        // conv1: out0 = 1+1+1 + 0 = 3, out1 = 0.5*3 + 2 = 3.5.
        let spec = NetworkSpec::new(vec![LayerSpec::conv("c1", 3, 2), LayerSpec::conv("c2", 2, 1)]).unwrap();
        let mut w1 = ConvWeights::zeros(2, 3);
        for c in 0..3 {
            w1.set_tap(0, c, 1, 1, 1.0);
            w1.set_tap(1, c, 1, 1, 0.5);
        }
        w1.bias_mut()[1] = 2.0;
        let mut w2 = ConvWeights::zeros(1, 2);
        w2.set_tap(0, 0, 1, 1, 1.0);
        w2.set_tap(0, 1, 1, 1, 2.0);
        let net = Network::new(spec, vec![w1, w2]).unwrap();
        let img = FeatureTensor::filled(3, 1, 1, 1.0);
        let out = net.rescale_weights(&[img.clone()], PoolMode::Avg).unwrap();

        // a1 = [3, 3.5]; conv2 after compensation reads [1, 1] with taps
        // [3, 7], so a2 = 10.
        let r1 = out.weights("c1").unwrap();
        assert!((r1.tap(0, 0, 1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((r1.tap(1, 0, 1, 1) - 0.5 / 3.5).abs() < 1e-15);
        assert!((r1.bias()[1] - 2.0 / 3.5).abs() < 1e-15);
        let r2 = out.weights("c2").unwrap();
        assert!((r2.tap(0, 0, 1, 1) - 3.0 / 10.0).abs() < 1e-15);
        assert!((r2.tap(0, 1, 1, 1) - 7.0 / 10.0).abs() < 1e-15);

        let means = out.mean_activations(&[img], PoolMode::Avg).unwrap();
        for (_, m) in means {
            for v in m {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rescale_reports_dead_filters() {
        let spec = NetworkSpec::new(vec![LayerSpec::conv("c1", 3, 2)]).unwrap();
        let mut w = ConvWeights::zeros(2, 3);
        w.set_tap(0, 0, 1, 1, 1.0);
        w.set_tap(1, 0, 1, 1, -1.0);
        let net = Network::new(spec, vec![w]).unwrap();
        let err = net
            .rescale_weights(&[FeatureTensor::filled(3, 2, 2, 1.0)], PoolMode::Avg)
            .unwrap_err();
        match err {
            Error::DeadFilters { filters, .. } => {
                assert_eq!(filters.len(), 1);
                assert!(filters[0].starts_with("c1[1]"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(net.rescale_weights(&[], PoolMode::Avg).is_err());
    }
}
