//! Procedural images for tests, benchmarks and demos.

use std::f64::consts::TAU;

use rand::Rng;

use crate::seed;
use crate::tensor::Tensor;

/// A seamlessly periodic color texture: per channel, a sum of three plane
/// waves with integer frequencies, so the pattern tiles the `h × w` frame.
pub fn periodic_texture(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    let mut waves = Vec::new();
    for _ in 0..3 {
        let mut ch = Vec::new();
        for _ in 0..3 {
            let fx = rng.random_range(1..=4) as f64;
            let fy = rng.random_range(0..=4) as f64;
            let phase = rng.random_range(0.0..TAU);
            let amp = rng.random_range(0.08..0.16);
            ch.push((fx, fy, phase, amp));
        }
        waves.push(ch);
    }
    let mut data = Vec::with_capacity(3 * h * w);
    for ch in &waves {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = ch
                    .iter()
                    .map(|(fx, fy, ph, a)| {
                        a * (TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + ph).sin()
                    })
                    .sum();
                data.push((0.5 + v).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Spatially white noise with values uniform in `[0, 1]`.
pub fn noise_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = seed::rng(seed);
    Tensor::from_parts(vec![3, h, w], (0..3 * h * w).map(|_| rng.random::<f64>()).collect())
}

/// Number of classes produced by [`shape_texture_image`].
pub const SHAPE_TEXTURE_CLASSES: usize = 4;

/// A textured disc on a noisy gray background. The class fixes the stripe
/// orientation and the two stripe colors; the seed jitters the disc
/// position, radius, stripe phase and background noise.
pub fn shape_texture_image(class: usize, h: usize, w: usize, seed: u64) -> Tensor {
    const COLORS: [[[f64; 3]; 2]; SHAPE_TEXTURE_CLASSES] = [
        [[0.85, 0.25, 0.2], [0.95, 0.8, 0.3]],
        [[0.2, 0.6, 0.25], [0.75, 0.9, 0.4]],
        [[0.2, 0.3, 0.85], [0.55, 0.8, 0.95]],
        [[0.6, 0.25, 0.7], [0.95, 0.6, 0.8]],
    ];
    let class = class % SHAPE_TEXTURE_CLASSES;
    let mut rng = seed::rng(seed);
    let scale = h.min(w) as f64;
    let cy = h as f64 / 2.0 + rng.random_range(-0.12..0.12) * scale;
    let cx = w as f64 / 2.0 + rng.random_range(-0.12..0.12) * scale;
    let r = rng.random_range(0.22..0.32) * scale;
    let phase = rng.random_range(0.0..TAU);
    let angle = class as f64 * std::f64::consts::PI / SHAPE_TEXTURE_CLASSES as f64;
    let (dy, dx) = angle.sin_cos();
    let period = scale / 8.0;
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = fy * fy + fx * fx <= r * r;
            let (ox, oy) = if inside { (dx, dy) } else { (-dy, dx) };
            let t = 0.5 + 0.5 * (TAU * (fx * ox + fy * oy) / period + phase).sin();
            for c in 0..3 {
                let v = COLORS[class][0][c] * (1.0 - t) + COLORS[class][1][c] * t;
                let noise = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
                data[c * h * w + y * w + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}
