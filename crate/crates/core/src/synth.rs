//! Texture generation: white-noise initialization, the composite loss and
//! pixel gradient, and the L-BFGS loop over pixels.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gram::{LayerWeighting, StatisticKind, TextureDescriptor};
use crate::network::Network;
use crate::optim::{lbfgs_minimize, LbfgsOptions, OptimError, Termination};
use crate::tensor::{FeatureTensor, PoolMode};

/// Layers of the compact model: the first conv layer plus one pooling
/// layer per scale.
pub const DEFAULT_LAYERS: [&str; 5] = ["conv1_1", "pool1", "pool2", "pool3", "pool4"];

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    /// Included layers and their loss weights, in network order.
    pub weighting: LayerWeighting,
    pub statistic: StatisticKind,
    pub pool_mode: PoolMode,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Half-width of the uniform noise used to initialize the image.
    pub noise_amplitude: f64,
    pub lbfgs: LbfgsOptions,
    /// Permit image sizes whose `M_l` differ from the target descriptor's.
    pub allow_size_mismatch: bool,
}

impl SynthesisConfig {
    /// Unit weights on `layers`, Gram statistic, average pooling, seed 0.
    pub fn new<S: AsRef<str>>(layers: &[S], height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            weighting: LayerWeighting::uniform(layers)?,
            statistic: StatisticKind::Gram,
            pool_mode: PoolMode::Avg,
            height,
            width,
            seed: 0,
            noise_amplitude: 0.1,
            lbfgs: LbfgsOptions::default(),
            allow_size_mismatch: false,
        })
    }

    pub fn layers(&self) -> Vec<String> {
        self.weighting.iter().map(|(n, _)| n.to_string()).collect()
    }
}

/// Uniform i.i.d. noise in `[-amplitude, amplitude]`, `3 × height × width`.
pub fn init_white_noise(height: usize, width: usize, seed: u64, amplitude: f64) -> Result<FeatureTensor> {
    if !(amplitude > 0.0 && amplitude.is_finite()) {
        return Err(Error::Validation(format!("noise amplitude must be positive, got {amplitude}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(FeatureTensor::from_fn(3, height, width, |_, _, _| {
        rng.random_range(-amplitude..=amplitude)
    }))
}

/// Result of one composite evaluation.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub total: f64,
    /// Unweighted `E_l` per configured layer, in config order.
    pub layer_losses: Vec<f64>,
    pub grad: FeatureTensor,
}

fn validate_against_target(network: &Network, target: &TextureDescriptor, config: &SynthesisConfig) -> Result<String> {
    let layers = config.layers();
    if layers != target.layer_names() {
        return Err(Error::Validation(format!(
            "configured layers {layers:?} do not match the target descriptor's {:?}",
            target.layer_names()
        )));
    }
    let spec = network.spec();
    let mut top = 0;
    for e in &target.entries {
        let idx = spec.index_of(&e.layer)?;
        top = top.max(idx);
        let layer = &spec.layers()[idx];
        if layer.out_channels != e.n_features {
            return Err(Error::Validation(format!(
                "descriptor layer {} has {} feature maps, network has {}",
                e.layer, e.n_features, layer.out_channels
            )));
        }
    }
    spec.check_input_dims(top, config.height, config.width)?;
    if !config.allow_size_mismatch {
        for e in &target.entries {
            let (_, h, w) = spec.output_dims(spec.index_of(&e.layer)?, config.height, config.width);
            if h * w != e.m {
                return Err(Error::Validation(format!(
                    "a {}x{} image gives {} positions at {}, the descriptor was built with {}; \
                     use the source size or allow the size mismatch explicitly",
                    config.height,
                    config.width,
                    h * w,
                    e.layer,
                    e.m
                )));
            }
        }
    }
    Ok(spec.layers()[top].name.clone())
}

/// `Σ_l w_l E_l` for `image` and its gradient with respect to the pixels.
pub fn loss_and_pixel_grad(
    network: &Network,
    image: &FeatureTensor,
    target: &TextureDescriptor,
    config: &SynthesisConfig,
) -> Result<LossEvaluation> {
    if image.shape() != (3, config.height, config.width) {
        return Err(Error::Dimension(format!(
            "image is {:?}, config expects 3x{}x{}",
            image.shape(),
            config.height,
            config.width
        )));
    }
    let top = validate_against_target(network, target, config)?;
    evaluate(network, image, target, config, &top)
}

fn evaluate(
    network: &Network,
    image: &FeatureTensor,
    target: &TextureDescriptor,
    config: &SynthesisConfig,
    top: &str,
) -> Result<LossEvaluation> {
    let acts = network.forward(image, top, config.pool_mode)?;
    let mut total = 0.0;
    let mut layer_losses = Vec::with_capacity(target.entries.len());
    let mut injected = HashMap::new();
    for entry in &target.entries {
        let w = config.weighting.get(&entry.layer).expect("validated layer set");
        let features = acts.get(&entry.layer).expect("forward reached every configured layer");
        let (loss, mut grad) = entry.loss_and_grad(features)?;
        total += w * loss;
        layer_losses.push(loss);
        if w != 0.0 {
            if w != 1.0 {
                for v in grad.data_mut() {
                    *v *= w;
                }
            }
            injected.insert(entry.layer.clone(), grad);
        }
    }
    let grad = network.backward_to_pixels(&acts, &injected)?;
    Ok(LossEvaluation {
        total,
        layer_losses,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisTraceRow {
    pub iteration: usize,
    pub total_loss: f64,
    pub grad_supnorm: f64,
    pub layer_losses: Vec<f64>,
}

/// Per-iteration record of a synthesis run; row 0 is the initial image.
#[derive(Debug, Clone)]
pub struct SynthesisTrace {
    pub layers: Vec<String>,
    pub rows: Vec<SynthesisTraceRow>,
    pub termination: Option<Termination>,
    pub wall_clock: Duration,
}

impl SynthesisTrace {
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.rows.first().map(|r| r.total_loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.total_loss)
    }

    /// CSV with header `iter,total_loss,grad_supnorm,E_<layer>...`, values
    /// printed with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,total_loss,grad_supnorm");
        for l in &self.layers {
            out.push_str(",E_");
            out.push_str(l);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{:.16e},{:.16e}", r.iteration, r.total_loss, r.grad_supnorm));
            for e in &r.layer_losses {
                out.push_str(&format!(",{e:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisOutput {
    /// Final image, still in preprocessed space.
    pub image: FeatureTensor,
    pub trace: SynthesisTrace,
}

/// A failed run together with whatever progress was made.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct SynthesisFailure {
    pub error: Error,
    pub trace: Option<SynthesisTrace>,
    pub image: Option<FeatureTensor>,
}

impl From<Error> for SynthesisFailure {
    fn from(error: Error) -> Self {
        Self {
            error,
            trace: None,
            image: None,
        }
    }
}

/// Generates a new image matching `target`, starting from seeded white noise.
pub fn synthesize(
    network: &Network,
    target: &TextureDescriptor,
    config: &SynthesisConfig,
) -> std::result::Result<SynthesisOutput, SynthesisFailure> {
    let init = init_white_noise(config.height, config.width, config.seed, config.noise_amplitude)?;
    synthesize_from(network, target, config, init)
}

/// Like [`synthesize`] but starting from a caller-supplied image.
pub fn synthesize_from(
    network: &Network,
    target: &TextureDescriptor,
    config: &SynthesisConfig,
    init: FeatureTensor,
) -> std::result::Result<SynthesisOutput, SynthesisFailure> {
    let started = Instant::now();
    if init.shape() != (3, config.height, config.width) {
        return Err(Error::Dimension(format!(
            "initial image is {:?}, config expects 3x{}x{}",
            init.shape(),
            config.height,
            config.width
        ))
        .into());
    }
    let top = validate_against_target(network, target, config)?;
    let (h, w) = (config.height, config.width);

    // Per-evaluation layer losses, indexed by evaluation number.
    let records: RefCell<Vec<Vec<f64>>> = RefCell::new(Vec::new());
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let objective = |x: &[f64]| -> (f64, Vec<f64>) {
        let image = FeatureTensor::from_vec(3, h, w, x.to_vec()).expect("optimizer keeps the length");
        match evaluate(network, &image, target, config, &top) {
            Ok(ev) => {
                records.borrow_mut().push(ev.layer_losses);
                (ev.total, ev.grad.into_data())
            }
            Err(e) => {
                records.borrow_mut().push(Vec::new());
                failure.borrow_mut().get_or_insert(e);
                (f64::NAN, vec![f64::NAN; x.len()])
            }
        }
    };

    let result = lbfgs_minimize(objective, init.into_data(), &config.lbfgs);
    let layers = config.layers();
    let build_trace = |rows: &[crate::optim::TraceRow], termination| {
        let records = records.borrow();
        SynthesisTrace {
            layers: layers.clone(),
            rows: rows
                .iter()
                .map(|r| SynthesisTraceRow {
                    iteration: r.iteration,
                    total_loss: r.loss,
                    grad_supnorm: r.grad_supnorm,
                    layer_losses: records[r.evaluation].clone(),
                })
                .collect(),
            termination,
            wall_clock: started.elapsed(),
        }
    };

    match result {
        Ok(r) => {
            let trace = build_trace(&r.trace, Some(r.termination));
            let image = FeatureTensor::from_vec(3, h, w, r.x).expect("length preserved");
            Ok(SynthesisOutput { image, trace })
        }
        Err(OptimError::NonFinite {
            iteration,
            evaluation,
            partial,
        }) => {
            let trace = build_trace(&partial.trace, None);
            let image = FeatureTensor::from_vec(3, h, w, partial.x).ok();
            let error = failure.borrow_mut().take().unwrap_or_else(|| {
                Error::Numeric(format!(
                    "non-finite loss or gradient at iteration {iteration} (evaluation {evaluation})"
                ))
            });
            Err(SynthesisFailure {
                error,
                trace: Some(trace),
                image,
            })
        }
        Err(e) => Err(Error::Validation(e.to_string()).into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::{describe, DescribeConfig};
    use crate::network::{random_init, tiny_spec};

    #[test]
    fn white_noise_is_seeded_and_bounded() {
        let a = init_white_noise(8, 6, 1, 0.1).unwrap();
        let b = init_white_noise(8, 6, 1, 0.1).unwrap();
        let c = init_white_noise(8, 6, 2, 0.1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| v.abs() <= 0.1));
        assert!(init_white_noise(2, 2, 0, 0.0).is_err());
    }

    #[test]
    fn white_noise_mean_within_clt_bound() {
        let (h, w, amp) = (64, 64, 0.1);
        for seed in 0..5 {
            let t = init_white_noise(h, w, seed, amp).unwrap();
            let mean = t.data().iter().sum::<f64>() / t.data().len() as f64;
            assert!(mean.abs() < 4.0 * amp / ((3 * h * w) as f64).sqrt(), "seed {seed}: {mean}");
        }
    }

    #[test]
    fn rejects_layer_and_size_mismatch() {
        let net = random_init(&tiny_spec(), 0, 0.3).unwrap();
        let src = init_white_noise(8, 8, 9, 1.0).unwrap();
        let target = describe(&net, &src, &DescribeConfig::new(&["conv1_1"], StatisticKind::Gram, PoolMode::Avg)).unwrap();

        let cfg = SynthesisConfig::new(&["conv1_2"], 8, 8).unwrap();
        assert!(matches!(synthesize(&net, &target, &cfg).unwrap_err().error, Error::Validation(_)));

        let cfg = SynthesisConfig::new(&["conv1_1"], 16, 16).unwrap();
        let err = synthesize(&net, &target, &cfg).unwrap_err().error;
        assert!(err.to_string().contains("size mismatch"), "{err}");

        let mut cfg = SynthesisConfig::new(&["conv1_1"], 16, 16).unwrap();
        cfg.allow_size_mismatch = true;
        cfg.lbfgs.max_iters = 2;
        assert!(synthesize(&net, &target, &cfg).is_ok());
    }

    #[test]
    fn csv_layout() {
        let trace = SynthesisTrace {
            layers: vec!["conv1_1".into(), "pool1".into()],
            rows: vec![SynthesisTraceRow {
                iteration: 0,
                total_loss: 0.1,
                grad_supnorm: 2.0,
                layer_losses: vec![0.25, 1.0 / 3.0],
            }],
            termination: None,
            wall_clock: Duration::ZERO,
        };
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "iter,total_loss,grad_supnorm,E_conv1_1,E_pool1");
        assert_eq!(
            lines.next().unwrap(),
            "0,1.0000000000000001e-1,2.0000000000000000e0,2.5000000000000000e-1,3.3333333333333331e-1"
        );
    }
}
