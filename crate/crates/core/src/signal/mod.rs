//! Discrete signals on regular lattices and the bridge to continuous
//! networks: decoding, corruption, reference filters and quality metrics.

mod codec;
pub mod synth;

pub use codec::{load_netpbm, load_pgm, load_ppm, load_wav, save_pgm, save_ppm, save_wav};

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::fitting::ConstraintSet;
use crate::inr::SirenNetwork;
use crate::numerics::{normal_from, SeedTree};

/// Samples of an `m`-dimensional signal with `channels` values per lattice
/// point. Points are stored row-major over `shape` (axis 0 slowest) with
/// channels interleaved.
///
/// Lattice point `j` along axis `i` sits at coordinate
/// `-1 + 2 j / (shape[i] - 1)`; coordinate `i` of a point is its position
/// along axis `i`, so for images `x_1` runs down the rows and `x_2` across
/// the columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalGrid {
    shape: Vec<usize>,
    channels: usize,
    data: Vec<f64>,
}

impl SignalGrid {
    pub fn new(shape: Vec<usize>, channels: usize, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || channels == 0 {
            return Err(Error::contract(format!(
                "grid shape {shape:?} with {channels} channels is empty"
            )));
        }
        let n: usize = shape.iter().product::<usize>() * channels;
        if data.len() != n {
            return Err(Error::contract(format!(
                "grid {shape:?}x{channels} needs {n} samples, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("grid samples must be finite"));
        }
        Ok(Self {
            shape,
            channels,
            data,
        })
    }

    pub fn filled(shape: Vec<usize>, channels: usize, value: f64) -> Result<Self> {
        let n = shape.iter().product::<usize>() * channels;
        Self::new(shape, channels, vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn points(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, point: usize, channel: usize) -> f64 {
        self.data[point * self.channels + channel]
    }

    /// Image-style accessor for 2-D grids.
    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.shape[1] + col) * self.channels + channel]
    }

    pub fn same_layout(&self, other: &SignalGrid) -> bool {
        self.shape == other.shape && self.channels == other.channels
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn channel(&self, c: usize) -> SignalGrid {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        SignalGrid {
            shape: self.shape.clone(),
            channels: 1,
            data,
        }
    }

    /// Lattice coordinates of every point, `points x m` row-major.
    pub fn coords(&self) -> Vec<f64> {
        lattice(&self.shape)
    }

    /// Point constraints for fitting, with intensities mapped from `[0, 1]`
    /// to `[-1, 1]`.
    pub fn to_constraints(&self) -> Result<ConstraintSet> {
        let targets = self.data.iter().map(|v| 2.0 * v - 1.0).collect();
        ConstraintSet::new(self.dims(), self.channels, self.coords(), targets)
    }

    /// Averages non-overlapping `factor`-sized boxes along every axis.
    pub fn box_downsample(&self, factor: usize) -> Result<SignalGrid> {
        if factor == 0 || self.shape.iter().any(|&s| s % factor != 0) {
            return Err(Error::contract(format!(
                "shape {:?} is not divisible by {factor}",
                self.shape
            )));
        }
        let out_shape: Vec<usize> = self.shape.iter().map(|s| s / factor).collect();
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out * self.channels];
        let weight = 1.0 / (factor.pow(self.dims() as u32)) as f64;
        let mut idx = vec![0usize; self.dims()];
        for p in 0..self.points() {
            unravel(p, &self.shape, &mut idx);
            let mut q = 0;
            for (i, &s) in out_shape.iter().enumerate() {
                q = q * s + idx[i] / factor;
            }
            for c in 0..self.channels {
                out[q * self.channels + c] += weight * self.data[p * self.channels + c];
            }
        }
        SignalGrid::new(out_shape, self.channels, out)
    }
}

fn unravel(mut p: usize, shape: &[usize], idx: &mut [usize]) {
    for i in (0..shape.len()).rev() {
        idx[i] = p % shape[i];
        p /= shape[i];
    }
}

/// Coordinate of sample `j` on an axis of `size` samples.
pub fn axis_coord(j: usize, size: usize) -> f64 {
    if size == 1 {
        0.0
    } else {
        -1.0 + 2.0 * j as f64 / (size - 1) as f64
    }
}

/// All lattice coordinates of `shape`, row-major, `points x m`.
pub fn lattice(shape: &[usize]) -> Vec<f64> {
    let m = shape.len();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n * m);
    let mut idx = vec![0usize; m];
    for p in 0..n {
        unravel(p, shape, &mut idx);
        for i in 0..m {
            out.push(axis_coord(idx[i], shape[i]));
        }
    }
    out
}

/// Evaluates `f` (a batch evaluator on `points x m` coordinates returning
/// `points x channels` values in `[-1, 1]`) on the lattice of `shape` and
/// maps the result to clamped `[0, 1]` samples.
pub fn decode_with<F>(shape: &[usize], channels: usize, mut f: F) -> Result<SignalGrid>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::contract(format!("cannot decode onto shape {shape:?}")));
    }
    let coords = lattice(shape);
    let values = f(&coords)?;
    let data = values.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    SignalGrid::new(shape.to_vec(), channels, data)
}

/// Affine map of all samples onto `[0, 1]`; a constant grid maps to 0.
pub fn rescale_unit(grid: &SignalGrid) -> SignalGrid {
    let lo = grid.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = grid
        .data
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    SignalGrid {
        shape: grid.shape.clone(),
        channels: grid.channels,
        data,
    }
}

pub fn decode(net: &SirenNetwork, shape: &[usize]) -> Result<SignalGrid> {
    if shape.len() != net.input_dim() {
        return Err(Error::contract(format!(
            "shape {shape:?} does not match a {}-dimensional network",
            net.input_dim()
        )));
    }
    decode_with(shape, net.output_dim(), |pts| net.forward_batch(pts))
}

// ---------------------------------------------------------------------------
// corruption

/// Adds `N(0, sigma^2)` to every sample and clamps to `[0, 1]`.
pub fn add_gaussian_noise(grid: &SignalGrid, sigma: f64, seed: u64) -> Result<SignalGrid> {
    if !(sigma >= 0.0) {
        return Err(Error::contract("noise sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let mut rng = SeedTree::new(seed).stream(0);
    let mut out = grid.clone();
    for v in &mut out.data {
        *v = (*v + sigma * normal_from(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Chooses `round(fraction * points)` distinct lattice points; `true` marks
/// a dropped point.
pub fn random_mask(points: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract("mask fraction must lie in [0, 1]"));
    }
    let k = (fraction * points as f64).round() as usize;
    let mut rng = SeedTree::new(seed).stream(0);
    let mut mask = vec![false; points];
    for i in sample(&mut rng, points, k) {
        mask[i] = true;
    }
    Ok(mask)
}

pub const MASK_FILL: f64 = 0.0;

/// Drops a random `fraction` of points (all channels) to [`MASK_FILL`].
pub fn mask_pixels(grid: &SignalGrid, fraction: f64, seed: u64) -> Result<SignalGrid> {
    let mask = random_mask(grid.points(), fraction, seed)?;
    Ok(apply_mask(grid, &mask))
}

fn apply_mask(grid: &SignalGrid, mask: &[bool]) -> SignalGrid {
    let mut out = grid.clone();
    for (p, &drop) in mask.iter().enumerate() {
        if drop {
            for c in 0..grid.channels {
                out.data[p * grid.channels + c] = MASK_FILL;
            }
        }
    }
    out
}

/// Blanks every point where the single-channel `mask` exceeds 0.5.
pub fn overlay_text_mask(grid: &SignalGrid, mask: &SignalGrid) -> Result<SignalGrid> {
    if mask.shape != grid.shape || mask.channels != 1 {
        return Err(Error::contract("text mask must be single-channel with the grid's shape"));
    }
    let drop: Vec<bool> = mask.data.iter().map(|&v| v > 0.5).collect();
    Ok(apply_mask(grid, &drop))
}

// ---------------------------------------------------------------------------
// reference filters

/// Mirror index for a half-sample symmetric boundary (`d c b a | a b c d`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut r = i.rem_euclid(period);
    if r >= n {
        r = period - 1 - r;
    }
    r as usize
}

/// Normalized discrete Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with reflective boundaries, applied along every
/// axis and independently per channel.
pub fn gaussian_blur_reference(grid: &SignalGrid, sigma_px: f64) -> Result<SignalGrid> {
    if !(sigma_px >= 0.0) {
        return Err(Error::contract("blur sigma must be >= 0"));
    }
    if sigma_px == 0.0 {
        return Ok(grid.clone());
    }
    let k = gaussian_kernel(sigma_px);
    let radius = (k.len() / 2) as isize;
    let mut cur = grid.data.clone();
    let ch = grid.channels;
    let shape = &grid.shape;
    for axis in 0..shape.len() {
        let n = shape[axis];
        let stride: usize = shape[axis + 1..].iter().product::<usize>() * ch;
        let mut next = vec![0.0; cur.len()];
        let mut idx = vec![0usize; shape.len()];
        for p in 0..grid.points() {
            unravel(p, shape, &mut idx);
            let j = idx[axis] as isize;
            let base = p * ch - idx[axis] * stride;
            for c in 0..ch {
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let src = reflect(j + t as isize - radius, n);
                    acc += w * cur[base + src * stride + c];
                }
                next[p * ch + c] = acc;
            }
        }
        cur = next;
    }
    SignalGrid::new(grid.shape.clone(), ch, cur)
}

/// Sobel gradient magnitude of a 2-D grid, averaged over channels; borders
/// use the same reflection as the blur.
pub fn sobel_magnitude(grid: &SignalGrid) -> Result<SignalGrid> {
    if grid.dims() != 2 {
        return Err(Error::contract("sobel needs a 2-D grid"));
    }
    let (h, w) = (grid.shape[0], grid.shape[1]);
    let at = |r: isize, c: isize, ch: usize| grid.pixel(reflect(r, h), reflect(c, w), ch);
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for ch in 0..grid.channels {
                let gx = (at(r - 1, c + 1, ch) + 2.0 * at(r, c + 1, ch) + at(r + 1, c + 1, ch))
                    - (at(r - 1, c - 1, ch) + 2.0 * at(r, c - 1, ch) + at(r + 1, c - 1, ch));
                let gy = (at(r + 1, c - 1, ch) + 2.0 * at(r + 1, c, ch) + at(r + 1, c + 1, ch))
                    - (at(r - 1, c - 1, ch) + 2.0 * at(r - 1, c, ch) + at(r - 1, c + 1, ch));
                acc += (gx * gx + gy * gy).sqrt();
            }
            out[r as usize * w + c as usize] = acc / grid.channels as f64;
        }
    }
    SignalGrid::new(vec![h, w], 1, out)
}

// ---------------------------------------------------------------------------
// metrics

fn check_pair(a: &SignalGrid, b: &SignalGrid) -> Result<()> {
    if !a.same_layout(b) {
        return Err(Error::contract(format!(
            "grids differ in layout: {:?}x{} vs {:?}x{}",
            a.shape, a.channels, b.shape, b.channels
        )));
    }
    Ok(())
}

pub fn mse(a: &SignalGrid, b: &SignalGrid) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

pub fn mae(a: &SignalGrid, b: &SignalGrid) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.data.len() as f64)
}

/// `10 log10(1 / MSE)` in dB; `+inf` for identical grids.
pub fn psnr(a: &SignalGrid, b: &SignalGrid) -> Result<f64> {
    let e = mse(a, b)?;
    Ok(if e == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / e).log10()
    })
}

const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over all sliding `8 x 8` windows (length-8 windows for 1-D
/// signals) and channels, with uniform window weights.
pub fn ssim(a: &SignalGrid, b: &SignalGrid) -> Result<f64> {
    check_pair(a, b)?;
    let win: Vec<usize> = a.shape.iter().map(|&s| s.min(SSIM_WINDOW)).collect();
    let starts: Vec<usize> = a.shape.iter().zip(&win).map(|(s, w)| s - w + 1).collect();
    let n_windows: usize = starts.iter().product();
    let win_pts: usize = win.iter().product();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut sidx = vec![0usize; a.dims()];
    let mut widx = vec![0usize; a.dims()];
    for c in 0..a.channels {
        for wi in 0..n_windows {
            unravel(wi, &starts, &mut sidx);
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for q in 0..win_pts {
                unravel(q, &win, &mut widx);
                let mut p = 0;
                for i in 0..a.dims() {
                    p = p * a.shape[i] + sidx[i] + widx[i];
                }
                let x = a.data[p * a.channels + c];
                let y = b.data[p * b.channels + c];
                sa += x;
                sb += y;
                saa += x * x;
                sbb += y * y;
                sab += x * y;
            }
            let n = win_pts as f64;
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pearson correlation of two equally long sample vectors.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::build_siren;

    fn ramp(h: usize, w: usize) -> SignalGrid {
        let data = (0..h * w).map(|i| (i % w) as f64 / w as f64).collect();
        SignalGrid::new(vec![h, w], 1, data).unwrap()
    }

    #[test]
    fn lattice_corners() {
        let l = lattice(&[3, 2]);
        assert_eq!(l, vec![-1.0, -1.0, -1.0, 1.0, 0.0, -1.0, 0.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn psnr_and_ssim_identities() {
        let a = ramp(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let mut b = a.clone();
        for v in b.data_mut() {
            *v += 0.1;
        }
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_of_independent_noise_is_small() {
        let n1 = crate::numerics::seeded_uniform(1, 0.0, 1.0, 64 * 64).unwrap();
        let n2 = crate::numerics::seeded_uniform(2, 0.0, 1.0, 64 * 64).unwrap();
        let a = SignalGrid::new(vec![64, 64], 1, n1).unwrap();
        let b = SignalGrid::new(vec![64, 64], 1, n2).unwrap();
        assert!(ssim(&a, &b).unwrap().abs() < 0.1);
    }

    #[test]
    fn metrics_reject_mismatch() {
        assert!(psnr(&ramp(4, 4), &ramp(4, 5)).is_err());
    }

    #[test]
    fn blur_impulse_is_kernel() {
        let mut g = SignalGrid::filled(vec![21, 21], 1, 0.0).unwrap();
        g.data_mut()[10 * 21 + 10] = 1.0;
        let b = gaussian_blur_reference(&g, 1.5).unwrap();
        let k = gaussian_kernel(1.5);
        let r = k.len() / 2;
        assert!((b.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for i in 0..k.len() {
            for j in 0..k.len() {
                let v = b.pixel(10 + i - r, 10 + j - r, 0);
                assert!((v - k[i] * k[j]).abs() < 1e-15);
            }
        }
        assert_eq!(gaussian_blur_reference(&g, 0.0).unwrap(), g);
    }

    #[test]
    fn noise_and_masks() {
        let g = ramp(8, 8);
        assert_eq!(add_gaussian_noise(&g, 0.0, 3).unwrap(), g);
        let n1 = add_gaussian_noise(&g, 0.1, 3).unwrap();
        assert_eq!(n1, add_gaussian_noise(&g, 0.1, 3).unwrap());
        assert_ne!(n1, g);
        let all = mask_pixels(&g, 1.0, 1).unwrap();
        assert!(all.data().iter().all(|&v| v == MASK_FILL));
        let m = random_mask(100, 0.3, 4).unwrap();
        assert_eq!(m.iter().filter(|&&d| d).count(), 30);
    }

    #[test]
    fn sobel_on_ramp_is_flat_inside() {
        let s = sobel_magnitude(&ramp(10, 10)).unwrap();
        for r in 1..9 {
            for c in 1..9 {
                assert!((s.pixel(r, c, 0) - 0.8).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_constant_network() {
        let mut net = build_siren(2, 1, &[4], 30.0, 0).unwrap();
        let mut p = vec![0.0; net.param_count()];
        *p.last_mut().unwrap() = 0.2;
        net.set_flat_params(&p).unwrap();
        let g = decode(&net, &[5, 7]).unwrap();
        assert!(g.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
    }

    #[test]
    fn downsample_constant() {
        let g = SignalGrid::filled(vec![4, 6], 2, 0.25).unwrap();
        let d = g.box_downsample(2).unwrap();
        assert_eq!(d.shape(), &[2, 3]);
        assert!(d.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
