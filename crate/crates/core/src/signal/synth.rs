//! Deterministic synthetic test signals.

use rand::Rng;

use super::{gaussian_blur_reference, SignalGrid};
use crate::error::Result;
use crate::numerics::SeedTree;

/// A grayscale `size x size` scene: a tilted background gradient with a few
/// overlapping discs and rectangles, softened by a 1 px Gaussian so edges
/// stay representable by a small network.
pub fn scene(seed: u64, size: usize) -> Result<SignalGrid> {
    let mut rng = SeedTree::new(seed).stream(0);
    let s = size as f64;
    let (gx, gy): (f64, f64) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let base: f64 = rng.random_range(0.3..0.7);
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64 / s, (i % size) as f64 / s);
            base + gx * (r - 0.5) + gy * (c - 0.5)
        })
        .collect();
    let shapes = rng.random_range(3..=5);
    for _ in 0..shapes {
        let level: f64 = rng.random_range(0.05..0.95);
        let (cr, cc): (f64, f64) = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        if rng.random_bool(0.5) {
            let rad: f64 = rng.random_range(0.08..0.25);
            for (i, v) in img.iter_mut().enumerate() {
                let (r, c) = ((i / size) as f64 / s, (i % size) as f64 / s);
                if (r - cr).powi(2) + (c - cc).powi(2) < rad * rad {
                    *v = level;
                }
            }
        } else {
            let (hr, hc): (f64, f64) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
            for (i, v) in img.iter_mut().enumerate() {
                let (r, c) = ((i / size) as f64 / s, (i % size) as f64 / s);
                if (r - cr).abs() < hr && (c - cc).abs() < hc {
                    *v = level;
                }
            }
        }
    }
    let g = SignalGrid::new(vec![size, size], 1, img)?.clamp01();
    Ok(gaussian_blur_reference(&g, 1.0)?.clamp01())
}

/// `0.5 + amplitude * sin(2 pi f t)` sampled at `rate` for `seconds`.
pub fn tone(freq: f64, amplitude: f64, rate: u32, seconds: f64) -> Result<SignalGrid> {
    let n = (rate as f64 * seconds).round() as usize;
    let data = (0..n)
        .map(|i| 0.5 + amplitude * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    SignalGrid::new(vec![n], 1, data)
}
