//! Deterministic procedural textures for tests and demos.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imageio::Image8;

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
    color: [f64; 3],
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// A texture that repeats exactly every `period` pixels in both directions.
/// Built from sinusoids with integer frequencies over the period, so any
/// window of the infinite tiling can be rendered.
#[derive(Debug, Clone)]
pub struct PeriodicTexture {
    period: usize,
    tile: Vec<[u8; 3]>,
}

impl PeriodicTexture {
    pub fn new(period: usize, seed: u64) -> Self {
        assert!(period > 0, "period must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<Wave> = (0..12)
            .map(|_| {
                let fy = rng.random_range(-4i32..=4) as f64;
                let fx = rng.random_range(-4i32..=4) as f64;
                let amp = 1.0 / (1.0 + (fy * fy + fx * fx).sqrt());
                Wave {
                    fy,
                    fx,
                    phase: rng.random_range(0.0..TAU),
                    color: [0, 1, 2].map(|_| amp * rng.random_range(-60.0..60.0)),
                }
            })
            .collect();
        let p = period as f64;
        let mut tile = Vec::with_capacity(period * period);
        for y in 0..period {
            for x in 0..period {
                let mut rgb = [128.0; 3];
                for w in &waves {
                    let s = (TAU * (w.fy * y as f64 + w.fx * x as f64) / p + w.phase).sin();
                    for (c, v) in rgb.iter_mut().enumerate() {
                        *v += w.color[c] * s;
                    }
                }
                tile.push(rgb.map(to_u8));
            }
        }
        Self { period, tile }
    }

    pub fn period(&self) -> usize {
        self.period
    }

    /// `height × width` window of the tiling whose top-left pixel is tile
    /// position `(offset_y, offset_x)`.
    pub fn render(&self, height: usize, width: usize, offset_y: usize, offset_x: usize) -> Image8 {
        let p = self.period;
        let mut data = Vec::with_capacity(3 * height * width);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&self.tile[((y + offset_y) % p) * p + (x + offset_x) % p]);
            }
        }
        Image8 { width, height, data }
    }
}

/// Non-periodic texture with a roughly `1/f` amplitude spectrum, a dominant
/// orientation and some sparse blobs.
pub fn natural_texture(height: usize, width: usize, seed: u64) -> Image8 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let mut waves = Vec::new();
    for _ in 0..160 {
        let radius: f64 = rng.random_range(0.01f64..0.45).powf(1.3);
        let angle = if rng.random_bool(0.4) {
            theta + rng.random_range(-0.2..0.2)
        } else {
            rng.random_range(0.0..TAU)
        };
        let base = 30.0 / (1.0 + 40.0 * radius);
        let lum = base * rng.random_range(0.5..1.0);
        waves.push(Wave {
            fy: radius * angle.sin(),
            fx: radius * angle.cos(),
            phase: rng.random_range(0.0..TAU),
            color: [lum * 1.1, lum, lum * 0.8].map(|v| v + base * rng.random_range(-0.3..0.3)),
        });
    }
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..(height * width / 200).max(1))
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(1.0..3.5),
                [0, 1, 2].map(|_| rng.random_range(-50.0..50.0)),
            )
        })
        .collect();
    let mut data = Vec::with_capacity(3 * height * width);
    for y in 0..height {
        for x in 0..width {
            let mut rgb = [120.0, 110.0, 95.0];
            for w in &waves {
                let s = (TAU * (w.fy * y as f64 + w.fx * x as f64) + w.phase).sin();
                for (c, v) in rgb.iter_mut().enumerate() {
                    *v += w.color[c] * s;
                }
            }
            for (by, bx, r, col) in &blobs {
                let d2 = ((y as f64 - by).powi(2) + (x as f64 - bx).powi(2)) / (r * r);
                if d2 < 9.0 {
                    let g = (-0.5 * d2).exp();
                    for (c, v) in rgb.iter_mut().enumerate() {
                        *v += col[c] * g;
                    }
                }
            }
            data.extend(rgb.map(to_u8));
        }
    }
    Image8 { width, height, data }
}
