//! Analytic coordinate derivatives of networks, to arbitrary order.
//!
//! [`jet_eval`] seeds each coordinate as a first-order jet and pushes the
//! jets through the network: affine layers act linearly on every Taylor
//! coefficient (one matrix product per layer for a whole batch of points),
//! sine layers use truncated composition. [`fd_derivatives`] is an
//! independent finite-difference oracle used by the tests.

mod jet;
mod multi_index;

pub use jet::{jet_elementwise, Elementwise, Jet};
pub(crate) use jet::{sin_lanes, Scratch};
pub use multi_index::{binomial, factorial, multi_index_set, stack_len, JetTables, MultiIndex};

use crate::error::{Error, Result};
use crate::inr::{Layer, SirenNetwork};
use crate::numerics::{gemm, DenseMatrix, Trans};

pub const DEFAULT_MAX_ORDER: usize = 4;

/// Raw partial derivatives `d^n f(x)` for every `|n| <= K`, per channel, in
/// canonical multi-index order.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivativeStack {
    m: usize,
    order: usize,
    channels: usize,
    data: Vec<f64>,
}

impl DerivativeStack {
    pub fn new(m: usize, order: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let len = stack_len(m, order);
        if data.len() != len * channels {
            return Err(Error::contract(format!(
                "stack of {channels} channels needs {} entries, got {}",
                len * channels,
                data.len()
            )));
        }
        Ok(Self {
            m,
            order,
            channels,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Entries per channel (`M`).
    pub fn len_per_channel(&self) -> usize {
        stack_len(self.m, self.order)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len_per_channel();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, n: &MultiIndex) -> Option<f64> {
        let t = JetTables::get(self.m, self.order);
        t.index_of(n).map(|i| self.channel(c)[i])
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.channels).map(|c| self.channel(c)[0]).collect()
    }

    /// The same stack cut down to order `k <= K`.
    pub fn truncate(&self, k: usize) -> DerivativeStack {
        assert!(k <= self.order);
        let keep = stack_len(self.m, k);
        let n = self.len_per_channel();
        let mut data = Vec::with_capacity(keep * self.channels);
        for c in 0..self.channels {
            data.extend_from_slice(&self.data[c * n..c * n + keep]);
        }
        DerivativeStack {
            m: self.m,
            order: k,
            channels: self.channels,
            data,
        }
    }

    /// Full order-`k` derivative tensor of one channel, `m^k` entries with
    /// the first index slowest, rebuilt from the multiplicity-free storage.
    pub fn symmetric_tensor(&self, c: usize, k: usize) -> Vec<f64> {
        assert!(k <= self.order);
        let t = JetTables::get(self.m, self.order);
        let ch = self.channel(c);
        let total = self.m.pow(k as u32);
        let mut out = Vec::with_capacity(total);
        let mut counts = vec![0u8; self.m];
        for flat in 0..total {
            counts.fill(0);
            let mut r = flat;
            for _ in 0..k {
                counts[r % self.m] += 1;
                r /= self.m;
            }
            let idx = t.index_of(&MultiIndex::new(counts.clone())).unwrap();
            out.push(ch[idx]);
        }
        out
    }

    /// `sum_k ||grad^k f||_F^2` per channel, counting each distinct mixed
    /// partial with its multiplicity `|n|!/n!`.
    pub fn frobenius_sq(&self, c: usize) -> f64 {
        let t = JetTables::get(self.m, self.order);
        self.channel(c)
            .iter()
            .zip(&t.indices)
            .map(|(v, n)| n.multiplicity() * v * v)
            .sum()
    }
}

/// Derivative stacks of many points, `[point][channel][M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackBatch {
    pub m: usize,
    pub order: usize,
    pub channels: usize,
    pub points: usize,
    pub data: Vec<f64>,
}

impl StackBatch {
    pub fn len_per_channel(&self) -> usize {
        stack_len(self.m, self.order)
    }

    pub fn point(&self, p: usize) -> &[f64] {
        let n = self.len_per_channel() * self.channels;
        &self.data[p * n..(p + 1) * n]
    }

    pub fn stack(&self, p: usize) -> DerivativeStack {
        DerivativeStack {
            m: self.m,
            order: self.order,
            channels: self.channels,
            data: self.point(p).to_vec(),
        }
    }
}

/// Jet evaluation with a configurable ceiling on the derivative order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetEngine {
    pub max_order: usize,
}

impl Default for JetEngine {
    fn default() -> Self {
        Self {
            max_order: DEFAULT_MAX_ORDER,
        }
    }
}

const CHUNK: usize = 128;

impl JetEngine {
    pub fn with_max_order(max_order: usize) -> Self {
        Self { max_order }
    }

    fn check(&self, order: usize) -> Result<()> {
        if order > self.max_order {
            return Err(Error::Capability(format!(
                "derivative order {order} exceeds the configured maximum {}",
                self.max_order
            )));
        }
        Ok(())
    }

    pub fn eval(&self, net: &SirenNetwork, x: &[f64], order: usize) -> Result<DerivativeStack> {
        if x.len() != net.input_dim() {
            return Err(Error::contract(format!(
                "coordinate has dimension {}, network expects {}",
                x.len(),
                net.input_dim()
            )));
        }
        let b = self.eval_batch(net, x, order)?;
        Ok(b.stack(0))
    }

    /// Stacks at every point of a row-major `n x m` buffer.
    pub fn eval_batch(&self, net: &SirenNetwork, points: &[f64], order: usize) -> Result<StackBatch> {
        self.check(order)?;
        let m = net.input_dim();
        if !points.len().is_multiple_of(m) {
            return Err(Error::contract("point buffer is not a multiple of the input dimension"));
        }
        let n_points = points.len() / m;
        let c = net.output_dim();
        let t = JetTables::get(m, order);
        let ml = t.len();
        let mut out = vec![0.0; n_points * c * ml];
        let mut scratch = Scratch::default();
        for (ci, chunk) in points.chunks(CHUNK * m).enumerate() {
            let p = chunk.len() / m;
            let h = propagate_chunk(net, &t, chunk, &mut scratch);
            for pi in 0..p {
                let dst = &mut out[(ci * CHUNK + pi) * c * ml..(ci * CHUNK + pi + 1) * c * ml];
                for mi in 0..ml {
                    let row = &h[(pi * ml + mi) * c..(pi * ml + mi + 1) * c];
                    let f = t.factorials[mi];
                    for ch in 0..c {
                        dst[ch * ml + mi] = row[ch] * f;
                    }
                }
            }
        }
        Ok(StackBatch {
            m,
            order,
            channels: c,
            points: n_points,
            data: out,
        })
    }

    /// Taylor-convention jets of the network output, `[point][M][c]`; the
    /// raw form used by layers that keep composing.
    pub fn taylor_batch(&self, net: &SirenNetwork, points: &[f64], order: usize) -> Result<Vec<f64>> {
        self.check(order)?;
        let m = net.input_dim();
        let t = JetTables::get(m, order);
        let mut scratch = Scratch::default();
        let mut out = Vec::with_capacity(points.len() / m * t.len() * net.output_dim());
        for chunk in points.chunks(CHUNK * m) {
            out.extend(propagate_chunk(net, &t, chunk, &mut scratch));
        }
        Ok(out)
    }
}

/// Pre-activation `h W + b` for a single point, shared with
/// [`SirenNetwork::forward`] so zeroth-order entries match it bit for bit.
fn affine_value(layer: &Layer, h: &[f64]) -> Vec<f64> {
    let mut z = layer.weight.vec_mul(h);
    for (zj, bj) in z.iter_mut().zip(&layer.bias) {
        *zj += bj;
    }
    z
}

/// Taylor jets of the network output on one chunk, `(p*M) x c` row-major.
fn propagate_chunk(net: &SirenNetwork, t: &JetTables, chunk: &[f64], s: &mut Scratch) -> Vec<f64> {
    let m = net.input_dim();
    let p = chunk.len() / m;
    let ml = t.len();
    let layers = net.layers();

    let first = &layers[0];
    let w = first.fan_out();
    let mut h = vec![0.0; p * ml * w];
    for pi in 0..p {
        let x = &chunk[pi * m..(pi + 1) * m];
        let block = &mut h[pi * ml * w..(pi + 1) * ml * w];
        block[..w].copy_from_slice(&affine_value(first, x));
        if t.order >= 1 {
            for i in 0..m {
                block[(1 + i) * w..(2 + i) * w].copy_from_slice(first.weight.row(i));
            }
        }
    }
    if net.is_sine_layer(0) {
        for block in h.chunks_exact_mut(ml * w) {
            sin_lanes(t, block, w, net.sine_scale(0), s);
        }
    }

    let mut width = w;
    for (li, layer) in layers.iter().enumerate().skip(1) {
        let out_w = layer.fan_out();
        let mut z = vec![0.0; p * ml * out_w];
        gemm(
            Trans::No,
            Trans::No,
            p * ml,
            out_w,
            width,
            1.0,
            &h,
            width,
            layer.weight.as_slice(),
            out_w,
            0.0,
            &mut z,
            out_w,
        );
        for pi in 0..p {
            let value = affine_value(layer, &h[pi * ml * width..pi * ml * width + width]);
            z[pi * ml * out_w..pi * ml * out_w + out_w].copy_from_slice(&value);
        }
        if net.is_sine_layer(li) {
            for block in z.chunks_exact_mut(ml * out_w) {
                sin_lanes(t, block, out_w, net.sine_scale(li), s);
            }
        }
        h = z;
        width = out_w;
    }
    h
}

/// All partials of `net` at `x` up to order `K` (default order ceiling).
pub fn jet_eval(net: &SirenNetwork, x: &[f64], order: usize) -> Result<DerivativeStack> {
    JetEngine::default().eval(net, x, order)
}

/// Gradient `c x m` by the chain rule through per-layer Jacobians; reuses
/// the forward weights the way a derivative network does.
pub fn first_order_closed_form(net: &SirenNetwork, x: &[f64]) -> Result<DenseMatrix> {
    let m = net.input_dim();
    if x.len() != m {
        return Err(Error::contract(format!(
            "coordinate has dimension {}, network expects {m}",
            x.len()
        )));
    }
    // jac: m x width, d h / d x with h a row vector
    let mut h = x.to_vec();
    let mut jac = DenseMatrix::identity(m);
    for (i, layer) in net.layers().iter().enumerate() {
        let z = affine_value(layer, &h);
        let mut next = jac.matmul(&layer.weight)?;
        if net.is_sine_layer(i) {
            let s = net.sine_scale(i);
            let cols = next.cols();
            for r in 0..next.rows() {
                for c in 0..cols {
                    let v = next.get(r, c) * s * (s * z[c]).cos();
                    next.set(r, c, v);
                }
            }
            h = z.iter().map(|v| (s * v).sin()).collect();
        } else {
            h = z;
        }
        jac = next;
    }
    Ok(jac.transpose())
}

/// Central finite differences for every multi-index up to order `K`.
///
/// The stencil for `n` is the tensor product over axes of the `n_i`-th
/// central difference `sum_j (-1)^j C(n_i, j) f(x + (n_i/2 - j) h e_i) / h^n_i`.
pub fn fd_derivatives<F>(f: F, x: &[f64], order: usize, h: f64) -> Result<DerivativeStack>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let m = x.len();
    let channels = f(x).len();
    let set = multi_index_set(m, order);
    let ml = set.len();
    let mut data = vec![0.0; channels * ml];
    let mut pt = vec![0.0; m];
    for (idx, n) in set.iter().enumerate() {
        let e = n.exponents();
        // odometer over stencil taps j_i in 0..=n_i
        let mut taps = vec![0usize; m];
        loop {
            let mut weight = 1.0;
            for i in 0..m {
                let ni = e[i] as usize;
                let j = taps[i];
                pt[i] = x[i] + (ni as f64 / 2.0 - j as f64) * h;
                weight *= binomial(ni, j) as f64 * if j.is_multiple_of(2) { 1.0 } else { -1.0 };
            }
            let val = f(&pt);
            for c in 0..channels {
                data[c * ml + idx] += weight * val[c];
            }
            let mut axis = 0;
            while axis < m {
                taps[axis] += 1;
                if taps[axis] <= e[axis] as usize {
                    break;
                }
                taps[axis] = 0;
                axis += 1;
            }
            if axis == m {
                break;
            }
        }
        let scale = h.powi(n.order() as i32);
        for c in 0..channels {
            data[c * ml + idx] /= scale;
        }
    }
    DerivativeStack::new(m, order, channels, data)
}

/// Richardson-extrapolated central differences, `(4 D(h/2) - D(h)) / 3`,
/// accurate to `O(h^4)`.
pub fn fd_derivatives_richardson<F>(f: F, x: &[f64], order: usize, h: f64) -> Result<DerivativeStack>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let coarse = fd_derivatives(&f, x, order, h)?;
    let fine = fd_derivatives(&f, x, order, h / 2.0)?;
    let data = coarse
        .data
        .iter()
        .zip(&fine.data)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect();
    DerivativeStack::new(coarse.m, order, coarse.channels, data)
}
