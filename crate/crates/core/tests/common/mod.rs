//! Oracles shared by the integration tests. Nothing here calls into the
//! library's own numerics except to build inputs.
#![allow(dead_code)]

use gramtex::FeatureTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f64, hi: f64) -> FeatureTensor {
    FeatureTensor::from_fn(c, h, w, |_, _, _| rng.random_range(lo..hi))
}

/// Values with magnitude in `[min_abs, 1)` and random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, min_abs: f64) -> FeatureTensor {
    FeatureTensor::from_fn(c, h, w, |_, _, _| {
        let m: f64 = rng.random_range(min_abs..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Central differences with step `h` at the given coordinates.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            p[i] = x[i] + h;
            let a = f(&p);
            p[i] = x[i] - h;
            let b = f(&p);
            p[i] = x[i];
            (a - b) / (2.0 * h)
        })
        .collect()
}

/// Fourth-order central differences: error `O(h⁴)` instead of `O(h²)`.
pub fn finite_diff4(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let mut at = |d: f64| {
                p[i] = x[i] + d;
                let v = f(&p);
                p[i] = x[i];
                v
            };
            (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
        })
        .collect()
}

/// Max over pairs of `|a − b| / max(|a|, |b|, floor)`, where `floor` is
/// `1e-6` of the largest magnitude in either vector. Components gated to
/// exactly zero are thus held to an absolute `1e-12 × scale` instead of
/// being compared against differencing noise.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-6 * scale).max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Gram matrix by the defining triple loop, row-major `n × n`.
pub fn brute_gram(f: &FeatureTensor) -> Vec<f64> {
    let n = f.channels();
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..f.spatial_len() {
                s += f.plane(i)[k] * f.plane(j)[k];
            }
            g[i * n + j] = s;
        }
    }
    g
}

/// `E = Σ (G − Ĝ)² / (4 N² M²)` straight from the definition.
pub fn brute_gram_loss(target: &[f64], current: &[f64], n: usize, m: usize) -> f64 {
    let s: f64 = target.iter().zip(current).map(|(a, b)| (a - b) * (a - b)).sum();
    s / (4.0 * (n * n) as f64 * (m * m) as f64)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric row-major `n × n`
/// matrix. Returns eigenvalues sorted descending and the matching unit
/// eigenvectors.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// Radially averaged power spectrum of a single-channel `h × w` plane by a
/// direct 2-D DFT (mean removed). Bin `r` covers integer radius
/// `round(sqrt(fy² + fx²)) == r` with centred frequencies.
pub fn radial_power_spectrum(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    let x: Vec<f64> = plane.iter().map(|v| v - mean).collect();
    let tau = std::f64::consts::TAU;
    // Separable DFT: rows then columns.
    let mut rows = vec![(0.0, 0.0); h * w];
    for y in 0..h {
        for u in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for xx in 0..w {
                let ang = -tau * (u * xx) as f64 / w as f64;
                re += x[y * w + xx] * ang.cos();
                im += x[y * w + xx] * ang.sin();
            }
            rows[y * w + u] = (re, im);
        }
    }
    let nbins = ((h / 2) as f64).hypot((w / 2) as f64).round() as usize + 1;
    let mut power = vec![0.0; nbins];
    let mut count = vec![0usize; nbins];
    for u in 0..w {
        for v in 0..h {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                let ang = -tau * (v * y) as f64 / h as f64;
                let (c, s) = (ang.cos(), ang.sin());
                let (a, b) = rows[y * w + u];
                re += a * c - b * s;
                im += a * s + b * c;
            }
            let fy = if v <= h / 2 { v as f64 } else { v as f64 - h as f64 };
            let fx = if u <= w / 2 { u as f64 } else { u as f64 - w as f64 };
            let r = fy.hypot(fx).round() as usize;
            power[r] += re * re + im * im;
            count[r] += 1;
        }
    }
    power.iter().zip(&count).map(|(p, &c)| if c > 0 { p / c as f64 } else { 0.0 }).collect()
}

/// Channel-summed radial spectrum of a 3-channel tensor.
pub fn tensor_spectrum(t: &FeatureTensor) -> Vec<f64> {
    let mut total: Vec<f64> = Vec::new();
    for c in 0..t.channels() {
        let s = radial_power_spectrum(t.plane(c), t.height(), t.width());
        if total.is_empty() {
            total = s;
        } else {
            total.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
    }
    total
}

/// L2 distance between log spectra, skipping the DC bin.
pub fn log_spectrum_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .skip(1)
        .map(|(x, y)| ((x + 1e-12).ln() - (y + 1e-12).ln()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Same, after normalizing each spectrum to unit total (non-DC) power, so
/// only the spectral shape is compared.
pub fn shape_spectrum_distance(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a[1..].iter().sum();
    let nb: f64 = b[1..].iter().sum();
    let a: Vec<f64> = a.iter().map(|v| v / na).collect();
    let b: Vec<f64> = b.iter().map(|v| v / nb).collect();
    log_spectrum_distance(&a, &b)
}

/// Frobenius norm of the difference over the Frobenius norm of `a`.
pub fn rel_frobenius(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let n: f64 = a.iter().map(|x| x * x).sum();
    (d / n).sqrt()
}

/// `½ (x − c)ᵀ A (x − c)` with `A = Q diag(λ) Qᵀ`, `Q` a product of random
/// Householder reflections.
pub struct Quadratic {
    pub a: Vec<f64>,
    pub center: Vec<f64>,
    pub n: usize,
}

impl Quadratic {
    pub fn new(seed: u64, n: usize, eigen: impl Fn(usize) -> f64) -> Self {
        let mut r = rng(seed);
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            q[i * n + i] = 1.0;
        }
        for _ in 0..3 {
            let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
            let vv: f64 = v.iter().map(|x| x * x).sum();
            // q ← (I − 2vvᵀ/vᵀv) q
            for col in 0..n {
                let d: f64 = (0..n).map(|k| v[k] * q[k * n + col]).sum::<f64>() * 2.0 / vv;
                for k in 0..n {
                    q[k * n + col] -= d * v[k];
                }
            }
        }
        let lambda: Vec<f64> = (0..n).map(&eigen).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| q[i * n + k] * lambda[k] * q[j * n + k]).sum();
            }
        }
        let center = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        Self { a, center, n }
    }

    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        let g: Vec<f64> = (0..self.n).map(|i| (0..self.n).map(|j| self.a[i * self.n + j] * d[j]).sum()).collect();
        (0.5 * d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>(), g)
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
    let (a, b) = (x[0], x[1]);
    let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
    (f, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)])
}
