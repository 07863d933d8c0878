//! Approximating convolutions by polynomials in the gradient operator.
//!
//! A kernel `g` acts on band-limited signals through its spectrum
//! `g^(w) = int g(x) exp(-2 pi i w.x) dx`. Because the symbol of `d^n` is
//! `(2 pi i w)^n`, fitting `g^` on the band by a real combination of those
//! symbols yields coefficients `a_n` with `sum_n a_n d^n f ~ g * f`.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;

use crate::deriv::{multi_index_set, JetEngine, MultiIndex};
use crate::error::{Error, Result};
use crate::inr::SirenNetwork;
use crate::insp_op::{apply_linear, InspOperator};
use crate::numerics::SeedTree;
use crate::signal::SignalGrid;

pub const DEFAULT_BAND: f64 = 3.0;
pub const DEFAULT_LATTICE: usize = 129;
const DAMPING: f64 = 1e-10;
const REFINE_STEPS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    /// Isotropic normalized Gaussian of standard deviation `sigma`.
    Gaussian { sigma: f64 },
    Delta,
    /// `d/dx_axis` as a (distributional) kernel.
    Derivative { axis: usize },
    Sampled(KernelGrid),
}

impl Kernel {
    /// `gaussian:SIGMA`, `delta` or `derivative:AXIS`.
    pub fn parse(tag: &str) -> Result<Self> {
        let (name, arg) = match tag.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (tag, None),
        };
        let bad = || Error::contract(format!("cannot parse kernel `{tag}`"));
        match (name, arg) {
            ("gaussian", Some(a)) => {
                let sigma: f64 = a.parse().map_err(|_| bad())?;
                if !(sigma > 0.0) {
                    return Err(bad());
                }
                Ok(Kernel::Gaussian { sigma })
            }
            ("delta", None) => Ok(Kernel::Delta),
            ("derivative", Some(a)) => Ok(Kernel::Derivative {
                axis: a.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }

    /// Closed-form transform for analytic kernels.
    fn spectrum_at(&self, w: &[f64]) -> Complex64 {
        match self {
            Kernel::Gaussian { sigma } => {
                let w2: f64 = w.iter().map(|v| v * v).sum();
                Complex64::new((-2.0 * PI * PI * sigma * sigma * w2).exp(), 0.0)
            }
            Kernel::Delta => Complex64::new(1.0, 0.0),
            Kernel::Derivative { axis } => Complex64::new(0.0, 2.0 * PI * w[*axis]),
            Kernel::Sampled(g) => g.transform(w),
        }
    }

    /// Samples per side needed to hold the kernel on a grid of `spacing`.
    fn radius(&self, spacing: f64) -> Result<usize> {
        match self {
            Kernel::Gaussian { sigma } => Ok((8.0 * sigma / spacing).ceil() as usize),
            Kernel::Delta => Ok(0),
            Kernel::Derivative { .. } => Err(Error::Capability(
                "a derivative kernel has no sampled form for the oracle".into(),
            )),
            Kernel::Sampled(g) => {
                if (g.spacing - spacing).abs() > 1e-12 * spacing {
                    return Err(Error::contract("sampled kernel spacing differs from the signal's"));
                }
                Ok(g.radius)
            }
        }
    }
}

/// A kernel sampled on a centered lattice of `(2 radius + 1)^m` points.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrid {
    pub m: usize,
    pub radius: usize,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl KernelGrid {
    pub fn new(m: usize, radius: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        let side = 2 * radius + 1;
        if m == 0 || !(spacing > 0.0) || values.len() != side.pow(m as u32) {
            return Err(Error::contract("kernel grid shape does not match its values"));
        }
        Ok(Self {
            m,
            radius,
            spacing,
            values,
        })
    }

    pub fn sample(kernel: &Kernel, m: usize, spacing: f64) -> Result<Self> {
        let radius = kernel.radius(spacing)?;
        let side = 2 * radius + 1;
        let n = side.pow(m as u32);
        let values = match kernel {
            Kernel::Gaussian { sigma } => {
                let norm = (2.0 * PI * sigma * sigma).powf(-(m as f64) / 2.0);
                (0..n)
                    .map(|i| {
                        let r2: f64 = offsets(i, m, radius).iter().map(|&o| (o as f64 * spacing).powi(2)).sum();
                        norm * (-r2 / (2.0 * sigma * sigma)).exp()
                    })
                    .collect()
            }
            Kernel::Delta => vec![spacing.powi(-(m as i32))],
            Kernel::Sampled(g) => return Ok(g.clone()),
            Kernel::Derivative { .. } => unreachable!("rejected by radius"),
        };
        Self::new(m, radius, spacing, values)
    }

    /// Quadrature of the Fourier integral.
    fn transform(&self, w: &[f64]) -> Complex64 {
        let vol = self.spacing.powi(self.m as i32);
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &v) in self.values.iter().enumerate() {
            let phase: f64 = offsets(i, self.m, self.radius)
                .iter()
                .zip(w)
                .map(|(&o, &wi)| o as f64 * self.spacing * wi)
                .sum();
            acc += v * Complex64::from_polar(1.0, -2.0 * PI * phase);
        }
        acc * vol
    }
}

/// Signed per-axis offsets of flat index `i` in a centered lattice.
fn offsets(mut i: usize, m: usize, radius: usize) -> Vec<isize> {
    let side = 2 * radius + 1;
    let mut o = vec![0isize; m];
    for k in (0..m).rev() {
        o[k] = (i % side) as isize - radius as isize;
        i /= side;
    }
    o
}

/// Transform samples on the symmetric lattice `[-B, B]^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSamples {
    pub m: usize,
    pub band: f64,
    pub per_axis: usize,
    /// `N x m` frequencies.
    pub freqs: Vec<f64>,
    pub values: Vec<Complex64>,
}

impl SpectrumSamples {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn freq(&self, i: usize) -> &[f64] {
        &self.freqs[i * self.m..(i + 1) * self.m]
    }
}

pub fn kernel_spectrum(kernel: &Kernel, m: usize, band: f64, per_axis: usize) -> Result<SpectrumSamples> {
    if !(band > 0.0) {
        return Err(Error::contract("band must be positive"));
    }
    if per_axis == 0 || m == 0 {
        return Err(Error::contract("spectrum lattice must be nonempty"));
    }
    if let Kernel::Derivative { axis } = kernel {
        if *axis >= m {
            return Err(Error::contract(format!("derivative axis {axis} outside {m} dims")));
        }
    }
    let axis: Vec<f64> = (0..per_axis)
        .map(|j| {
            if per_axis == 1 {
                0.0
            } else {
                -band + 2.0 * band * j as f64 / (per_axis - 1) as f64
            }
        })
        .collect();
    let n = per_axis.pow(m as u32);
    let mut freqs = Vec::with_capacity(n * m);
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = i;
        let start = freqs.len();
        freqs.resize(start + m, 0.0);
        for k in (0..m).rev() {
            freqs[start + k] = axis[r % per_axis];
            r /= per_axis;
        }
        values.push(kernel.spectrum_at(&freqs[start..]));
    }
    Ok(SpectrumSamples {
        m,
        band,
        per_axis,
        freqs,
        values,
    })
}

/// Real coefficients `a_n`, `|n| <= d`, of `p(grad) = sum_n a_n d^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyGradOperator {
    pub m: usize,
    pub degree: usize,
    pub band: f64,
    /// In the canonical multi-index order.
    pub coeffs: Vec<f64>,
    /// Root mean square of `g^ - p^` over the lattice.
    pub residual: f64,
    /// Maximum of `|g^ - p^|` over the lattice.
    pub sup_residual: f64,
}

impl PolyGradOperator {
    /// The symbol `sum_n a_n (2 pi i w)^n`.
    pub fn symbol(&self, w: &[f64]) -> Complex64 {
        multi_index_set(self.m, self.degree)
            .iter()
            .zip(&self.coeffs)
            .map(|(n, &a)| a * symbol_monomial(n, w))
            .sum()
    }

    pub fn coeff(&self, n: &MultiIndex) -> f64 {
        let set = multi_index_set(self.m, self.degree);
        set.iter().position(|x| x == n).map_or(0.0, |i| self.coeffs[i])
    }

    /// The same polynomial as a linear derivative-stack operator.
    pub fn to_operator(&self) -> InspOperator {
        InspOperator::linear(self.m, self.degree, self.coeffs.clone())
    }
}

fn i_pow(k: usize) -> Complex64 {
    match k % 4 {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(0.0, 1.0),
        2 => Complex64::new(-1.0, 0.0),
        _ => Complex64::new(0.0, -1.0),
    }
}

/// `(2 pi i w)^n`
fn symbol_monomial(n: &MultiIndex, w: &[f64]) -> Complex64 {
    i_pow(n.order()) * (2.0 * PI).powi(n.order() as i32) * n.monomial(w)
}

/// Least-squares fit of real `a` to `g^` over the lattice.
///
/// Unknowns are solved in the scaled basis `i^|n| (w/B)^n`, whose columns
/// stay O(1) on the band, then mapped back by `(2 pi B)^-|n|`. Real and
/// imaginary parts of the residual are stacked so the unknowns never leave
/// the reals.
pub fn fit_poly_coeffs(spec: &SpectrumSamples, degree: usize) -> Result<PolyGradOperator> {
    if spec.is_empty() {
        return Err(Error::contract("empty spectrum lattice"));
    }
    let set = multi_index_set(spec.m, degree);
    let p = set.len();
    let n = spec.len() as f64;
    let mut ata = DMatrix::<f64>::zeros(p, p);
    let mut aty = DVector::<f64>::zeros(p);
    let mut col = vec![Complex64::new(0.0, 0.0); p];
    let mut scaled = vec![0.0; spec.m];
    for i in 0..spec.len() {
        for (s, w) in scaled.iter_mut().zip(spec.freq(i)) {
            *s = w / spec.band;
        }
        for (c, idx) in col.iter_mut().zip(&set) {
            *c = i_pow(idx.order()) * idx.monomial(&scaled);
        }
        let g = spec.values[i];
        for r in 0..p {
            aty[r] += (col[r].re * g.re + col[r].im * g.im) / n;
            for c in 0..=r {
                let v = (col[r].re * col[c].re + col[r].im * col[c].im) / n;
                ata[(r, c)] += v;
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            ata[(c, r)] = ata[(r, c)];
        }
    }
    let mut damped = ata.clone();
    for r in 0..p {
        damped[(r, r)] += DAMPING;
    }
    let chol = damped.cholesky().ok_or(Error::Conditioning { degree })?;
    let diag: Vec<f64> = (0..p).map(|i| chol.l_dirty()[(i, i)].powi(2)).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    // a pivot at the damping level means the damping, not the data, fixed it
    if min <= 1e3 * DAMPING || min < 1e-13 * max {
        return Err(Error::Conditioning { degree });
    }
    let mut b = chol.solve(&aty);
    // iterated Tikhonov: strips the damping bias once pivots are well above it
    for _ in 0..REFINE_STEPS {
        let r = &aty - &ata * &b;
        b += chol.solve(&r);
    }
    let coeffs: Vec<f64> = set
        .iter()
        .zip(b.iter())
        .map(|(idx, &bv)| bv / (2.0 * PI * spec.band).powi(idx.order() as i32))
        .collect();
    if coeffs.iter().any(|v| !v.is_finite()) {
        return Err(Error::Conditioning { degree });
    }
    let mut op = PolyGradOperator {
        m: spec.m,
        degree,
        band: spec.band,
        coeffs,
        residual: 0.0,
        sup_residual: 0.0,
    };
    let (mut sq, mut sup) = (0.0, 0.0f64);
    for i in 0..spec.len() {
        let e = (spec.values[i] - op.symbol(spec.freq(i))).norm();
        sq += e * e;
        sup = sup.max(e);
    }
    op.residual = (sq / n).sqrt();
    op.sup_residual = sup;
    Ok(op)
}

/// Periodic convolution `(g * f)(x_i) = sum_j g(y_j) f(x_i - y_j) h^m` of a
/// signal sampled on a torus with the kernel's spacing `h`.
pub fn conv_oracle(f: &SignalGrid, g: &KernelGrid) -> Result<SignalGrid> {
    if f.dims() != g.m {
        return Err(Error::contract("signal and kernel differ in dimension"));
    }
    let shape = f.shape().to_vec();
    let ch = f.channels();
    let vol = g.spacing.powi(g.m as i32);
    let mut out = vec![0.0; f.data().len()];
    let mut idx = vec![0usize; g.m];
    let kernel_offsets: Vec<Vec<isize>> = (0..g.values.len()).map(|k| offsets(k, g.m, g.radius)).collect();
    for p in 0..f.points() {
        let mut r = p;
        for k in (0..g.m).rev() {
            idx[k] = r % shape[k];
            r /= shape[k];
        }
        for (k, &gv) in g.values.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            let mut q = 0usize;
            for a in 0..g.m {
                let s = shape[a] as isize;
                let j = (idx[a] as isize - kernel_offsets[k][a]).rem_euclid(s) as usize;
                q = q * shape[a] + j;
            }
            for c in 0..ch {
                out[p * ch + c] += gv * f.data()[q * ch + c] * vol;
            }
        }
    }
    SignalGrid::new(shape, ch, out)
}

// ---------------------------------------------------------------------------
// validation

#[derive(Clone, Debug, PartialEq)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub freq: Vec<f64>,
    pub phase: f64,
}

/// `f(x) = sum_t A_t cos(2 pi w_t . x + phi_t)`
#[derive(Clone, Debug, PartialEq)]
pub struct SinusoidMixture {
    pub m: usize,
    pub terms: Vec<Sinusoid>,
}

impl SinusoidMixture {
    /// `terms` sinusoids with integer frequencies in `1..=max_freq` per
    /// axis (so they are periodic on the unit torus), random amplitudes in
    /// `[0.5, 1.5)` and phases.
    pub fn random(seed: u64, m: usize, terms: usize, max_freq: u32) -> Self {
        let mut rng = SeedTree::new(seed).stream(0);
        let terms = (0..terms)
            .map(|_| Sinusoid {
                amplitude: rng.random_range(0.5..1.5),
                freq: (0..m).map(|_| rng.random_range(1..=max_freq) as f64).collect(),
                phase: rng.random_range(0.0..2.0 * PI),
            })
            .collect();
        Self { m, terms }
    }

    pub fn bandwidth(&self) -> f64 {
        self.terms
            .iter()
            .flat_map(|t| t.freq.iter())
            .fold(0.0, |a: f64, w| a.max(w.abs()))
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.filtered(x, |_| Complex64::new(1.0, 0.0))
    }

    /// Exact response of the mixture to the multiplier `s(w)`.
    pub fn filtered(&self, x: &[f64], s: impl Fn(&[f64]) -> Complex64) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let arg = 2.0 * PI * t.freq.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + t.phase;
                t.amplitude * (s(&t.freq) * Complex64::from_polar(1.0, arg)).re
            })
            .sum()
    }
}

/// The function whose convolution is being approximated.
#[derive(Clone, Copy, Debug)]
pub enum TestSignal<'a> {
    Sinusoids(&'a SinusoidMixture),
    /// Scalar network; derivatives come from the jet engine.
    Inr(&'a SirenNetwork),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationConfig {
    pub band: f64,
    pub lattice: usize,
    /// Evaluation samples per axis.
    pub samples: usize,
    /// Ceiling handed to the jet engine for network signals.
    pub max_jet_order: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            band: DEFAULT_BAND,
            lattice: DEFAULT_LATTICE,
            samples: 512,
            max_jet_order: crate::deriv::DEFAULT_MAX_ORDER,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationReport {
    pub degree: usize,
    pub band: f64,
    pub lattice: usize,
    pub sup_error: f64,
    pub residual: f64,
    pub range: f64,
    pub runtime_ms: f64,
    pub coeffs: Vec<f64>,
}

/// Sup-norm distance between `p(grad) f` and the quadrature convolution
/// over a dense lattice.
///
/// Sinusoid mixtures live on the unit torus `[0, 1)^m` and are compared
/// against [`conv_oracle`]; networks are evaluated on `[-1, 1]^m`, with the
/// quadrature reaching past the edges since the network is defined there.
pub fn validate_approx(
    signal: TestSignal<'_>,
    kernel: &Kernel,
    degree: usize,
    cfg: &ValidationConfig,
) -> Result<ValidationReport> {
    let start = Instant::now();
    let m = match signal {
        TestSignal::Sinusoids(s) => s.m,
        TestSignal::Inr(net) => {
            if net.output_dim() != 1 {
                return Err(Error::contract("validation needs a scalar network"));
            }
            net.input_dim()
        }
    };
    if m > 2 {
        return Err(Error::contract("validation lattices support 1 or 2 dimensions"));
    }
    if let TestSignal::Inr(_) = signal {
        if degree > cfg.max_jet_order {
            return Err(Error::Capability(format!(
                "degree {degree} exceeds the jet order ceiling {}",
                cfg.max_jet_order
            )));
        }
    }
    let spec = kernel_spectrum(kernel, m, cfg.band, cfg.lattice)?;
    let poly = fit_poly_coeffs(&spec, degree)?;
    let n = cfg.samples;
    let shape = vec![n; m];
    let (approx, reference) = match signal {
        TestSignal::Sinusoids(s) => {
            if s.bandwidth() > cfg.band {
                return Err(Error::contract(format!(
                    "signal bandwidth {} exceeds the band {}",
                    s.bandwidth(),
                    cfg.band
                )));
            }
            if s.terms.iter().flat_map(|t| &t.freq).any(|w| w.fract() != 0.0) {
                return Err(Error::contract("torus validation needs integer frequencies"));
            }
            let h = 1.0 / n as f64;
            let pts = torus_points(&shape, h);
            let samples: Vec<f64> = pts.chunks(m).map(|x| s.eval(x)).collect();
            let grid = SignalGrid::new(shape.clone(), 1, samples)?;
            let reference = conv_oracle(&grid, &KernelGrid::sample(kernel, m, h)?)?.into_data();
            let approx = pts.chunks(m).map(|x| s.filtered(x, |w| poly.symbol(w))).collect();
            (approx, reference)
        }
        TestSignal::Inr(net) => {
            let h = 2.0 / (n - 1) as f64;
            let kg = KernelGrid::sample(kernel, m, h)?;
            let r = kg.radius;
            let ext: Vec<usize> = vec![n + 2 * r; m];
            let ext_pts: Vec<f64> = torus_points(&ext, h).iter().map(|v| v - 1.0 - r as f64 * h).collect();
            let ext_vals = net.forward_batch(&ext_pts)?;
            let reference = valid_conv(&ext_vals, &ext, &kg, r, &shape);
            let pts: Vec<f64> = torus_points(&shape, h).iter().map(|v| v - 1.0).collect();
            let batch = JetEngine::with_max_order(cfg.max_jet_order).eval_batch(net, &pts, degree)?;
            let approx = (0..batch.points)
                .map(|p| apply_linear(&poly.coeffs, &batch.stack(p)).map(|v| v[0]))
                .collect::<Result<Vec<_>>>()?;
            (approx, reference)
        }
    };
    let sup_error = approx
        .iter()
        .zip(&reference)
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let range = match signal {
        TestSignal::Sinusoids(s) => {
            let h = 1.0 / n as f64;
            range_of(&torus_points(&shape, h).chunks(m).map(|x| s.eval(x)).collect::<Vec<_>>())
        }
        TestSignal::Inr(net) => {
            let pts: Vec<f64> = torus_points(&shape, 2.0 / (n - 1) as f64).iter().map(|v| v - 1.0).collect();
            range_of(&net.forward_batch(&pts)?)
        }
    };
    Ok(ValidationReport {
        degree,
        band: cfg.band,
        lattice: cfg.lattice,
        sup_error,
        residual: poly.residual,
        range,
        runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        coeffs: poly.coeffs,
    })
}

fn range_of(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    hi - lo
}

/// Lattice `j * h` for every multi-index `j` of `shape`, row-major.
fn torus_points(shape: &[usize], h: f64) -> Vec<f64> {
    let m = shape.len();
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n * m);
    for p in 0..n {
        let mut r = p;
        let start = out.len();
        out.resize(start + m, 0.0);
        for k in (0..m).rev() {
            out[start + k] = (r % shape[k]) as f64 * h;
            r /= shape[k];
        }
    }
    out
}

/// Non-periodic quadrature on the interior `shape` of an extended lattice
/// padded by `pad` samples per side.
fn valid_conv(ext: &[f64], ext_shape: &[usize], g: &KernelGrid, pad: usize, shape: &[usize]) -> Vec<f64> {
    let m = shape.len();
    let vol = g.spacing.powi(m as i32);
    let n: usize = shape.iter().product();
    let kernel_offsets: Vec<Vec<isize>> = (0..g.values.len()).map(|k| offsets(k, m, g.radius)).collect();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; m];
    for (p, o) in out.iter_mut().enumerate() {
        let mut r = p;
        for k in (0..m).rev() {
            idx[k] = r % shape[k];
            r /= shape[k];
        }
        let mut acc = 0.0;
        for (k, &gv) in g.values.iter().enumerate() {
            let mut q = 0usize;
            for a in 0..m {
                let j = (idx[a] + pad) as isize - kernel_offsets[k][a];
                q = q * ext_shape[a] + j as usize;
            }
            acc += gv * ext[q];
        }
        *o = acc * vol;
    }
    out
}

/// Validation reports as CSV with a header row.
pub fn reports_to_csv(reports: &[ValidationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::contract(format!("csv: {e}"));
    w.write_record(["degree", "band", "lattice", "sup_error", "residual", "runtime_ms"]).map_err(io)?;
    for r in reports {
        w.write_record([
            r.degree.to_string(),
            r.band.to_string(),
            r.lattice.to_string(),
            format!("{:e}", r.sup_error),
            format!("{:e}", r.residual),
            format!("{:.3}", r.runtime_ms),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is ascii"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_spectra() {
        let d = kernel_spectrum(&Kernel::Delta, 2, 3.0, 9).unwrap();
        assert!(d.values.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        let g = Kernel::Gaussian { sigma: 0.05 };
        assert_eq!(g.spectrum_at(&[0.0]).re, 1.0);
        let v = g.spectrum_at(&[2.0]).re;
        assert!((v - (-2.0 * PI * PI * 0.0025 * 4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn sampled_gaussian_transform_matches_closed_form() {
        let g = Kernel::Gaussian { sigma: 0.05 };
        let kg = KernelGrid::sample(&g, 1, 1.0 / 512.0).unwrap();
        let s = Kernel::Sampled(kg);
        for w in [0.0, 1.0, 2.5] {
            assert!((s.spectrum_at(&[w]) - g.spectrum_at(&[w])).norm() < 1e-10);
        }
    }

    #[test]
    fn delta_and_derivative_recover_unit_coefficients() {
        for d in [0, 3, 6] {
            let op = fit_poly_coeffs(&kernel_spectrum(&Kernel::Delta, 1, 3.0, 129).unwrap(), d).unwrap();
            assert!((op.coeffs[0] - 1.0).abs() < 1e-8);
            assert!(op.coeffs[1..].iter().all(|v| v.abs() < 1e-8));
        }
        let op = fit_poly_coeffs(
            &kernel_spectrum(&Kernel::Derivative { axis: 0 }, 1, 3.0, 129).unwrap(),
            4,
        )
        .unwrap();
        for (i, v) in op.coeffs.iter().enumerate() {
            let e = if i == 1 { 1.0 } else { 0.0 };
            assert!((v - e).abs() < 1e-8, "{i}: {v}");
        }
    }

    #[test]
    fn gaussian_residual_decreases_and_odd_terms_vanish() {
        let spec = kernel_spectrum(&Kernel::Gaussian { sigma: 0.05 }, 1, 3.0, 129).unwrap();
        let mut prev = f64::INFINITY;
        for d in [2, 4, 6, 8] {
            let op = fit_poly_coeffs(&spec, d).unwrap();
            assert!(op.residual < prev, "degree {d}");
            prev = op.residual;
            for (i, v) in op.coeffs.iter().enumerate() {
                if i % 2 == 1 {
                    assert!(v.abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let spec = kernel_spectrum(&Kernel::Delta, 1, 3.0, 3).unwrap();
        assert!(matches!(fit_poly_coeffs(&spec, 8), Err(Error::Conditioning { degree: 8 })));
    }

    #[test]
    fn oracle_delta_and_mass() {
        let h = 1.0 / 64.0;
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        let f = SignalGrid::new(vec![64], 1, data).unwrap();
        let out = conv_oracle(&f, &KernelGrid::sample(&Kernel::Delta, 1, h).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let c = SignalGrid::filled(vec![64], 1, 0.7).unwrap();
        let g = KernelGrid::sample(&Kernel::Gaussian { sigma: 0.05 }, 1, h).unwrap();
        assert!(conv_oracle(&c, &g).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-9));
    }

    #[test]
    fn oracle_eigenfunction() {
        let n = 512;
        let h = 1.0 / n as f64;
        let data: Vec<f64> = (0..n).map(|i| (2.0 * PI * 2.0 * i as f64 * h).cos()).collect();
        let f = SignalGrid::new(vec![n], 1, data.clone()).unwrap();
        let k = Kernel::Gaussian { sigma: 0.05 };
        let out = conv_oracle(&f, &KernelGrid::sample(&k, 1, h).unwrap()).unwrap();
        let gh = k.spectrum_at(&[2.0]).re;
        for (o, d) in out.data().iter().zip(&data) {
            assert!((o - gh * d).abs() < 1e-3);
        }
    }

    #[test]
    fn single_frequency_is_exact() {
        let s = SinusoidMixture {
            m: 1,
            terms: vec![Sinusoid {
                amplitude: 1.0,
                freq: vec![2.0],
                phase: 0.3,
            }],
        };
        let r = validate_approx(TestSignal::Sinusoids(&s), &Kernel::Delta, 2, &ValidationConfig::default()).unwrap();
        assert!(r.sup_error < 1e-6 * r.range);
    }
}
