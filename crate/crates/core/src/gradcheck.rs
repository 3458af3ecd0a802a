//! Finite-difference verification of every backward path, on seeded
//! random instances and a tiny network.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gram::{
    gram_matrix, layer_loss, layer_loss_grad, mean_loss, mean_loss_grad, mean_statistic, pca_fit, DescriptorEntry,
    Statistic,
};
use crate::network::{random_init, tiny_spec};
use crate::gram::{describe, DescribeConfig, StatisticKind};
use crate::synth::{loss_and_pixel_grad, SynthesisConfig};
use crate::tensor::{
    conv3x3_backward_input, conv3x3_forward, pool2x2_backward, pool2x2_forward, relu_backward, relu_forward,
    ConvWeights, FeatureTensor, PoolMode,
};

/// Central difference `(f(x + h e_i) − f(x − h e_i)) / 2h` at each index.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    step: f64,
) -> Vec<f64> {
    let mut probe = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let h = step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a − n| / max(|a|, |n|)` over the pairs, with the denominator
/// floored at `1e-6` times the largest magnitude present.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (scale * 1e-6).max(f64::MIN_POSITIVE);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, min_abs: f64) -> FeatureTensor {
    FeatureTensor::from_fn(c, h, w, |_, _, _| {
        let mag: f64 = rng.random_range(min_abs..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

fn random_weights(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> ConvWeights {
    let kernel = (0..out * inp * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias = (0..out).map(|_| rng.random_range(-0.5..0.5)).collect();
    ConvWeights::new(out, inp, kernel, bias).expect("sizes match")
}

/// `½ Σ r_i y_i² + Σ c_i y_i` with its gradient.
struct Quadratic {
    r: Vec<f64>,
    c: Vec<f64>,
}

impl Quadratic {
    fn random(rng: &mut ChaCha8Rng, n: usize) -> Self {
        Self {
            r: (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
            c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    fn value(&self, y: &[f64]) -> f64 {
        y.iter()
            .zip(&self.r)
            .zip(&self.c)
            .map(|((y, r), c)| 0.5 * r * y * y + c * y)
            .sum()
    }

    fn grad(&self, y: &FeatureTensor) -> FeatureTensor {
        let data = y.data().iter().zip(&self.r).zip(&self.c).map(|((y, r), c)| r * y + c).collect();
        FeatureTensor::from_vec(y.channels(), y.height(), y.width(), data).unwrap()
    }
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn outcome(name: &str, analytic: &[f64], numeric: &[f64], tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        coordinates: analytic.len(),
        max_rel_error: max_relative_error(analytic, numeric),
        tolerance,
    }
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let w = random_weights(rng, 3, 2);
    let x = random_tensor(rng, 2, 5, 4, 0.0);
    let q = Quadratic::random(rng, 3 * 5 * 4);
    let y = conv3x3_forward(&x, &w)?;
    let analytic = conv3x3_backward_input(&q.grad(&y), &w)?;
    let numeric = central_difference(
        |v| q.value(conv3x3_forward(&FeatureTensor::from_vec(2, 5, 4, v.to_vec()).unwrap(), &w).unwrap().data()),
        x.data(),
        &all(x.data().len()),
        1e-5,
    );
    Ok(outcome("conv3x3_backward_input", analytic.data(), &numeric, 1e-6))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = random_tensor(rng, 3, 4, 4, 0.05);
    let q = Quadratic::random(rng, x.data().len());
    let analytic = relu_backward(&q.grad(&relu_forward(&x)), &x)?;
    let numeric = central_difference(
        |v| q.value(relu_forward(&FeatureTensor::from_vec(3, 4, 4, v.to_vec()).unwrap()).data()),
        x.data(),
        &all(x.data().len()),
        1e-6,
    );
    Ok(outcome("relu_backward", analytic.data(), &numeric, 1e-6))
}

fn check_pool(rng: &mut ChaCha8Rng, mode: PoolMode) -> Result<CheckOutcome> {
    let x = random_tensor(rng, 2, 4, 6, 0.0);
    let q = Quadratic::random(rng, 2 * 2 * 3);
    let (y, ctx) = pool2x2_forward(&x, mode)?;
    let analytic = pool2x2_backward(&q.grad(&y), &ctx, mode)?;
    let numeric = central_difference(
        |v| q.value(pool2x2_forward(&FeatureTensor::from_vec(2, 4, 6, v.to_vec()).unwrap(), mode).unwrap().0.data()),
        x.data(),
        &all(x.data().len()),
        1e-6,
    );
    Ok(outcome(&format!("pool2x2_backward ({mode})"), analytic.data(), &numeric, 1e-6))
}

/// Gram-loss gradient against differences of `E(gram(relu(F)))`, which
/// makes the rectification gate part of the oracle.
fn check_gram_grad(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (n, h, w) = (4, 3, 5);
    let f = random_tensor(rng, n, h, w, 1e-3);
    let target = gram_matrix(&relu_forward(&random_tensor(rng, n, h, w, 0.0)));
    let act = relu_forward(&f);
    let analytic = layer_loss_grad(&act, &target, &gram_matrix(&act), n, h * w)?;
    let analytic = relu_backward(&analytic, &f)?;
    let numeric = central_difference(
        |v| {
            let a = relu_forward(&FeatureTensor::from_vec(n, h, w, v.to_vec()).unwrap());
            layer_loss(&target, &gram_matrix(&a), n, h * w).unwrap()
        },
        f.data(),
        &all(f.data().len()),
        1e-6,
    );
    Ok(outcome("layer_loss_grad (gram)", analytic.data(), &numeric, 1e-6))
}

fn check_mean_grad(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (n, h, w) = (5, 2, 4);
    let f = random_tensor(rng, n, h, w, 1e-3);
    let target = mean_statistic(&relu_forward(&random_tensor(rng, n, h, w, 0.0)));
    let act = relu_forward(&f);
    let analytic = mean_loss_grad(&act, &target, &mean_statistic(&act))?;
    let numeric = central_difference(
        |v| {
            let a = relu_forward(&FeatureTensor::from_vec(n, h, w, v.to_vec()).unwrap());
            mean_loss(&target, &mean_statistic(&a)).unwrap()
        },
        f.data(),
        &all(f.data().len()),
        1e-6,
    );
    Ok(outcome("mean_loss_grad", analytic.data(), &numeric, 1e-6))
}

fn check_pca_grad(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (n, h, w, k) = (6, 4, 4, 3);
    let f = random_tensor(rng, n, h, w, 1e-3);
    let other = relu_forward(&random_tensor(rng, n, h, w, 0.0));
    let basis = Arc::new(pca_fit("layer", std::slice::from_ref(&other), k)?);
    let target = DescriptorEntry {
        layer: "layer".into(),
        n_features: n,
        m: h * w,
        statistic: Statistic::Pca {
            gram: gram_matrix(&crate::gram::project_features(&other, &basis)?),
            basis,
        },
    };
    let (_, analytic) = target.loss_and_grad(&relu_forward(&f))?;
    let analytic = relu_backward(&analytic, &f)?;
    let numeric = central_difference(
        |v| {
            let a = relu_forward(&FeatureTensor::from_vec(n, h, w, v.to_vec()).unwrap());
            target.loss(&target.measure_like(&a).unwrap()).unwrap()
        },
        f.data(),
        &all(f.data().len()),
        1e-6,
    );
    Ok(outcome("pca loss gradient", analytic.data(), &numeric, 1e-6))
}

/// Full pixel gradient of a tiny network (two conv layers, one pool, 8×8
/// input) with Gram terms on all three layers, at 64 random pixels.
fn check_pixels(seed: u64, rng: &mut ChaCha8Rng, statistic: StatisticKind) -> Result<CheckOutcome> {
    let net = random_init(&tiny_spec(), seed, 0.25)?;
    let layers = ["conv1_1", "conv1_2", "pool1"];
    let source = random_tensor(rng, 3, 8, 8, 0.0);
    let image = random_tensor(rng, 3, 8, 8, 0.0);
    let target = describe(&net, &source, &DescribeConfig::new(&layers, statistic, PoolMode::Avg))?;
    let mut config = SynthesisConfig::new(&layers, 8, 8)?;
    config.statistic = statistic;
    let eval = loss_and_pixel_grad(&net, &image, &target, &config)?;
    let indices: Vec<usize> = (0..64).map(|_| rng.random_range(0..image.data().len())).collect();
    let analytic: Vec<f64> = indices.iter().map(|&i| eval.grad.data()[i]).collect();
    let numeric = central_difference(
        |v| {
            let img = FeatureTensor::from_vec(3, 8, 8, v.to_vec()).unwrap();
            loss_and_pixel_grad(&net, &img, &target, &config).unwrap().total
        },
        image.data(),
        &indices,
        1e-5,
    );
    Ok(outcome(&format!("pixel gradient, tiny network ({statistic})"), &analytic, &numeric, 1e-4))
}

/// Runs every check for `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![
        check_conv(&mut rng)?,
        check_relu(&mut rng)?,
        check_pool(&mut rng, PoolMode::Avg)?,
        check_gram_grad(&mut rng)?,
        check_mean_grad(&mut rng)?,
        check_pca_grad(&mut rng)?,
    ];
    for statistic in [StatisticKind::Gram, StatisticKind::Mean, StatisticKind::Pca(4)] {
        out.push(check_pixels(seed, &mut rng, statistic)?);
    }
    // Pixel gradients are also checked with max pooling, where ties have
    // probability zero on random inputs.
    let net = random_init(&tiny_spec(), seed ^ 0x5eed, 0.25)?;
    let layers = ["conv1_1", "pool1"];
    let source = random_tensor(&mut rng, 3, 8, 8, 0.0);
    let image = random_tensor(&mut rng, 3, 8, 8, 0.0);
    let target = describe(&net, &source, &DescribeConfig::new(&layers, StatisticKind::Gram, PoolMode::Max))?;
    let mut config = SynthesisConfig::new(&layers, 8, 8)?;
    config.pool_mode = PoolMode::Max;
    let eval = loss_and_pixel_grad(&net, &image, &target, &config)?;
    let numeric = central_difference(
        |v| {
            let img = FeatureTensor::from_vec(3, 8, 8, v.to_vec()).unwrap();
            loss_and_pixel_grad(&net, &img, &target, &config).unwrap().total
        },
        image.data(),
        &all(image.data().len()),
        1e-6,
    );
    out.push(outcome("pixel gradient, tiny network (gram, max pooling)", eval.grad.data(), &numeric, 1e-4));

    Ok(out)
}
