//! Stacked derivative-stack convolutions running directly on a network.
//!
//! Each layer takes the jets of its input field, forms `filters` depthwise
//! combinations `sum_n theta_dn d^n y_c` shared across channels, mixes the
//! `channels x filters` results densely, normalizes each channel over the
//! lattice and applies ReLU. Jets are carried as partial derivatives: every
//! step is linear in them except ReLU, which masks them by the sign of the
//! value. The first layer sees the input network's jets at the total order
//! `sum K_l`; each layer consumes `K_l` of it.
//!
//! Normalization statistics are constants for the coordinate jets but are
//! differentiated through when computing parameter gradients.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::deriv::{multi_index_set, stack_len, JetEngine, JetTables};
use crate::error::{Error, Result};
use crate::inr::{rotation2, verify_envelope, ByteReader, Layer, SirenNetwork};
use crate::numerics::{adamw_step, gemm, normal_from, AdamWConfig, DenseMatrix, OptimizerState, ParamLayout, SeedTree, Trans};
use crate::signal::lattice;

pub const CONVNET_MAGIC: &[u8; 4] = b"INSC";
pub const CONVNET_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub order: usize,
    /// Depthwise filters per input channel.
    pub filters: usize,
    pub out_channels: usize,
    pub norm: bool,
    pub relu: bool,
}

impl ConvLayerSpec {
    pub fn new(order: usize, filters: usize, out_channels: usize) -> Self {
        Self {
            order,
            filters,
            out_channels,
            norm: true,
            relu: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetSpec {
    pub m: usize,
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    /// Lattice samples per axis.
    pub lattice: usize,
    /// Pooling regions per axis; 1 pools globally.
    pub pool_grid: usize,
    pub classes: usize,
    pub eps: f64,
    /// Derivatives are taken with respect to `x / coord_scale`, keeping
    /// the orders on a comparable footing.
    pub coord_scale: f64,
}

impl ConvNetSpec {
    /// Two order-2 layers on a 2-D single-channel input, pooled over 2x2 regions.
    pub fn two_layer(classes: usize) -> Self {
        Self {
            m: 2,
            in_channels: 1,
            layers: vec![ConvLayerSpec::new(2, 8, 16), ConvLayerSpec::new(2, 4, 32)],
            lattice: 14,
            pool_grid: 2,
            classes,
            eps: 1e-10,
            coord_scale: 2.0 / 27.0,
        }
    }

    pub fn total_order(&self) -> usize {
        self.layers.iter().map(|l| l.order).sum()
    }

    pub fn points(&self) -> usize {
        self.lattice.pow(self.m as u32)
    }

    pub fn feature_len(&self) -> usize {
        self.pool_grid.pow(self.m as u32) * self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::contract("a convnet needs at least one layer"));
        }
        if self.m == 0 || self.in_channels == 0 || self.classes < 2 {
            return Err(Error::contract("convnet needs m >= 1, input channels and >= 2 classes"));
        }
        if self.layers.iter().any(|l| l.filters == 0 || l.out_channels == 0) {
            return Err(Error::contract("convnet layer widths must be positive"));
        }
        if self.lattice == 0 || self.pool_grid == 0 || self.pool_grid > self.lattice {
            return Err(Error::contract("pooling grid must divide a nonempty lattice"));
        }
        if !(self.eps >= 0.0) || !(self.coord_scale > 0.0) {
            return Err(Error::contract("eps must be >= 0 and coord_scale > 0"));
        }
        Ok(())
    }

    /// Input order of layer `l`.
    fn order_in(&self, l: usize) -> usize {
        self.layers[l..].iter().map(|s| s.order).sum()
    }

    fn channels_in(&self, l: usize) -> usize {
        if l == 0 {
            self.in_channels
        } else {
            self.layers[l - 1].out_channels
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `filters x M(K)` row-major.
    pub theta: Vec<f64>,
    /// `(channels_in * filters) x out_channels`, row index `c * filters + d`.
    pub mix: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    spec: ConvNetSpec,
    layers: Vec<ConvLayer>,
    head: Layer,
}

/// Jets of the frozen input on the lattice, `[point][M][channel]`, with
/// partials rescaled to `coord_scale` units.
#[derive(Clone, Debug, PartialEq)]
pub struct InputJets {
    pub points: usize,
    pub order: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn input_jets(spec: &ConvNetSpec, engine: &JetEngine, inr: &SirenNetwork) -> Result<InputJets> {
    spec.validate()?;
    if inr.input_dim() != spec.m || inr.output_dim() != spec.in_channels {
        return Err(Error::contract(format!(
            "network maps {} -> {}, convnet expects {} -> {}",
            inr.input_dim(),
            inr.output_dim(),
            spec.m,
            spec.in_channels
        )));
    }
    let order = spec.total_order();
    let pts = lattice(&vec![spec.lattice; spec.m]);
    let batch = engine.eval_batch(inr, &pts, order)?;
    let t = JetTables::get(spec.m, order);
    let ml = t.len();
    let c = spec.in_channels;
    let scale: Vec<f64> = t.orders.iter().map(|&k| spec.coord_scale.powi(k as i32)).collect();
    let mut data = vec![0.0; batch.points * ml * c];
    for p in 0..batch.points {
        let src = batch.point(p);
        for ch in 0..c {
            for k in 0..ml {
                data[(p * ml + k) * c + ch] = src[ch * ml + k] * scale[k];
            }
        }
    }
    Ok(InputJets {
        points: batch.points,
        order,
        channels: c,
        data,
    })
}

/// Per-layer record of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Depthwise outputs `[point][M_out][c_in * filters]`.
    z: Vec<f64>,
    /// Mixed, pre-normalization `[point][M_out][c_out]`.
    pre: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[point][c_out]`
    active: Vec<bool>,
    /// Output jets `[point][M_out][c_out]`.
    pub out: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTrace {
    pub layers: Vec<LayerTrace>,
    /// `[region][channel]`
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ConvTrace {
    /// Per-point values of the last layer, `[point][channel]`.
    pub fn features(&self) -> &[f64] {
        &self.layers.last().unwrap().out
    }
}

/// For each `n` of order `<= k` and each `j` of order `<= r_in - k`, the
/// index of `n + j` in the order-`r_in` table.
fn shift_table(m: usize, r_in: usize, k: usize) -> Vec<Vec<usize>> {
    let t = JetTables::get(m, r_in);
    let outs = multi_index_set(m, r_in - k);
    multi_index_set(m, k)
        .iter()
        .map(|n| outs.iter().map(|j| t.index_of(&n.add(j)).unwrap()).collect())
        .collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

impl ConvNet {
    pub fn init(spec: ConvNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let tree = SeedTree::new(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, ls) in spec.layers.iter().enumerate() {
            let mut rng = tree.stream(l as u64);
            let mk = stack_len(spec.m, ls.order);
            let theta = (0..ls.filters * mk).map(|_| normal_from(&mut rng) / (mk as f64).sqrt()).collect();
            let fan_in = spec.channels_in(l) * ls.filters;
            let std = (2.0 / fan_in as f64).sqrt();
            let mix = DenseMatrix::from_fn(fan_in, ls.out_channels, |_, _| normal_from(&mut rng) * std);
            layers.push(ConvLayer { theta, mix });
        }
        let mut rng = tree.stream(spec.layers.len() as u64);
        let f = spec.feature_len();
        let bound = 1.0 / (f as f64).sqrt();
        let head = Layer {
            weight: DenseMatrix::from_fn(f, spec.classes, |_, _| rng.random_range(-bound..bound)),
            bias: vec![0.0; spec.classes],
        };
        Ok(Self { spec, layers, head })
    }

    pub fn from_parts(spec: ConvNetSpec, layers: Vec<ConvLayer>, head: Layer) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(Error::contract("layer count differs from the spec"));
        }
        for (l, (p, ls)) in layers.iter().zip(&spec.layers).enumerate() {
            if p.theta.len() != ls.filters * stack_len(spec.m, ls.order)
                || p.mix.rows() != spec.channels_in(l) * ls.filters
                || p.mix.cols() != ls.out_channels
            {
                return Err(Error::contract(format!("layer {l} parameters do not match the spec")));
            }
        }
        if head.fan_in() != spec.feature_len() || head.fan_out() != spec.classes || head.bias.len() != spec.classes {
            return Err(Error::contract("head shape does not match the spec"));
        }
        Ok(Self { spec, layers, head })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn head(&self) -> &Layer {
        &self.head
    }

    pub fn param_layout(&self) -> ParamLayout {
        let mut l = ParamLayout::new();
        for (i, p) in self.layers.iter().enumerate() {
            l.push(format!("layer{i}.theta"), p.theta.len());
            l.push(format!("layer{i}.mix"), p.mix.as_slice().len());
        }
        l.push("head.weight", self.head.weight.as_slice().len());
        l.push("head.bias", self.head.bias.len());
        l
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().len()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.layers {
            out.extend_from_slice(&p.theta);
            out.extend_from_slice(p.mix.as_slice());
        }
        out.extend_from_slice(self.head.weight.as_slice());
        out.extend_from_slice(&self.head.bias);
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract("convnet parameter count mismatch"));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[off..off + dst.len()]);
            off += dst.len();
        };
        for p in &mut self.layers {
            take(&mut p.theta);
            take(p.mix.as_mut_slice());
        }
        take(self.head.weight.as_mut_slice());
        take(&mut self.head.bias);
        Ok(())
    }

    fn region_of(&self, p: usize) -> usize {
        let (n, g) = (self.spec.lattice, self.spec.pool_grid);
        let mut r = p;
        let mut idx = vec![0; self.spec.m];
        for k in (0..self.spec.m).rev() {
            idx[k] = r % n;
            r /= n;
        }
        idx.iter().fold(0, |acc, &i| acc * g + i * g / n)
    }

    fn layer_forward(&self, l: usize, x: &[f64], points: usize, stats: Option<(&[f64], &[f64])>) -> LayerTrace {
        let spec = &self.spec;
        let ls = spec.layers[l];
        let par = &self.layers[l];
        let (r_in, c_in) = (spec.order_in(l), spec.channels_in(l));
        let (m_in, m_out) = (stack_len(spec.m, r_in), stack_len(spec.m, r_in - ls.order));
        let shift = shift_table(spec.m, r_in, ls.order);
        let (d_n, c_out) = (ls.filters, ls.out_channels);
        let mk = shift.len();
        let width = c_in * d_n;
        let mut z = vec![0.0; points * m_out * width];
        for p in 0..points {
            let xp = &x[p * m_in * c_in..(p + 1) * m_in * c_in];
            for j in 0..m_out {
                let zr = &mut z[(p * m_out + j) * width..(p * m_out + j + 1) * width];
                for c in 0..c_in {
                    for d in 0..d_n {
                        let th = &par.theta[d * mk..(d + 1) * mk];
                        let mut acc = 0.0;
                        for (n, &t) in th.iter().enumerate() {
                            acc += t * xp[shift[n][j] * c_in + c];
                        }
                        zr[c * d_n + d] = acc;
                    }
                }
            }
        }
        let rows = points * m_out;
        let mut pre = vec![0.0; rows * c_out];
        gemm(Trans::No, Trans::No, rows, c_out, width, 1.0, &z, width, par.mix.as_slice(), c_out, 0.0, &mut pre, c_out);

        let (mean, scale) = match (ls.norm, stats) {
            (false, _) => (vec![0.0; c_out], vec![1.0; c_out]),
            (true, Some((mu, s))) => (mu.to_vec(), s.to_vec()),
            (true, None) => {
                let mut mu = vec![0.0; c_out];
                for p in 0..points {
                    for (o, v) in mu.iter_mut().enumerate() {
                        *v += pre[p * m_out * c_out + o];
                    }
                }
                mu.iter_mut().for_each(|v| *v /= points as f64);
                let mut var = vec![0.0; c_out];
                for p in 0..points {
                    for o in 0..c_out {
                        var[o] += (pre[p * m_out * c_out + o] - mu[o]).powi(2);
                    }
                }
                let s = var.iter().map(|v| (v / points as f64 + spec.eps).sqrt()).collect();
                (mu, s)
            }
        };
        let mut out = pre.clone();
        if ls.norm {
            for p in 0..points {
                for j in 0..m_out {
                    for o in 0..c_out {
                        let v = &mut out[(p * m_out + j) * c_out + o];
                        if j == 0 {
                            *v -= mean[o];
                        }
                        *v /= scale[o];
                    }
                }
            }
        }
        let mut active = vec![true; points * c_out];
        if ls.relu {
            for p in 0..points {
                for o in 0..c_out {
                    if !(out[p * m_out * c_out + o] > 0.0) {
                        active[p * c_out + o] = false;
                        for j in 0..m_out {
                            out[(p * m_out + j) * c_out + o] = 0.0;
                        }
                    }
                }
            }
        }
        LayerTrace {
            z,
            pre,
            mean,
            scale,
            active,
            out,
        }
    }

    fn check_input(&self, input: &InputJets) -> Result<()> {
        if input.points != self.spec.points()
            || input.order != self.spec.total_order()
            || input.channels != self.spec.in_channels
        {
            return Err(Error::contract("input jets do not match the convnet spec"));
        }
        Ok(())
    }

    pub fn forward(&self, input: &InputJets) -> Result<ConvTrace> {
        self.check_input(input)?;
        Ok(self.forward_from(input, 0))
    }

    /// Forward pass starting at layer `first`, whose input jets are given.
    fn forward_from(&self, input: &InputJets, first: usize) -> ConvTrace {
        let points = input.points;
        let mut layers: Vec<LayerTrace> = Vec::with_capacity(self.layers.len());
        for l in first..self.layers.len() {
            let x = layers.last().map_or(&input.data[..], |t| &t.out[..]);
            let t = self.layer_forward(l, x, points, None);
            layers.push(t);
        }
        let (pooled, logits) = self.head_forward(layers.last().map_or(&input.data[..], |t| &t.out[..]), points);
        ConvTrace { layers, pooled, logits }
    }

    fn head_forward(&self, feats: &[f64], points: usize) -> (Vec<f64>, Vec<f64>) {
        let c = feats.len() / points;
        let regions = self.spec.pool_grid.pow(self.spec.m as u32);
        let per_region = (points / regions) as f64;
        let mut pooled = vec![0.0; regions * c];
        for p in 0..points {
            let r = self.region_of(p);
            for o in 0..c {
                pooled[r * c + o] += feats[p * c + o];
            }
        }
        pooled.iter_mut().for_each(|v| *v /= per_region);
        let mut logits = self.head.weight.vec_mul(&pooled);
        for (z, b) in logits.iter_mut().zip(&self.head.bias) {
            *z += b;
        }
        (pooled, logits)
    }

    pub fn predict(&self, input: &InputJets) -> Result<usize> {
        let t = self.forward(input)?;
        Ok(argmax(&t.logits))
    }

    /// Mean cross-entropy over `inputs` and its gradient in
    /// [`Self::flat_params`] order.
    pub fn loss_grad(&self, inputs: &[&InputJets], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (loss, grads, _) = self.loss_grad_counted(inputs, labels)?;
        Ok((loss, grads))
    }

    fn loss_grad_counted(&self, inputs: &[&InputJets], labels: &[usize]) -> Result<(f64, Vec<f64>, usize)> {
        if inputs.len() != labels.len() || inputs.is_empty() {
            return Err(Error::contract("inputs and labels must be nonempty and equally long"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.spec.classes) {
            return Err(Error::contract(format!("label {y} outside {} classes", self.spec.classes)));
        }
        let layout = self.param_layout();
        let mut grads = vec![0.0; layout.len()];
        let mut loss = 0.0;
        let mut correct = 0;
        let inv_b = 1.0 / inputs.len() as f64;
        for (input, &y) in inputs.iter().zip(labels) {
            self.check_input(input)?;
            let trace = self.forward_from(input, 0);
            let ls = log_softmax(&trace.logits);
            loss -= ls[y] * inv_b;
            if argmax(&trace.logits) == y {
                correct += 1;
            }
            let mut dlogits: Vec<f64> = ls.iter().map(|v| v.exp() * inv_b).collect();
            dlogits[y] -= inv_b;
            self.backward(input, &trace, &dlogits, &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence { step: 0, loss });
        }
        Ok((loss, grads, correct))
    }

    fn backward(&self, input: &InputJets, trace: &ConvTrace, dlogits: &[f64], grads: &mut [f64]) {
        let spec = &self.spec;
        let points = input.points;
        let n_layers = self.layers.len();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for p in &self.layers {
            offsets.push(off);
            off += p.theta.len() + p.mix.as_slice().len();
        }
        let f = spec.feature_len();
        let classes = spec.classes;
        let (hw, hb) = grads[off..off + f * classes + classes].split_at_mut(f * classes);
        for (r, &x) in trace.pooled.iter().enumerate() {
            for (k, &g) in dlogits.iter().enumerate() {
                hw[r * classes + k] += x * g;
            }
        }
        for (b, &g) in hb.iter_mut().zip(dlogits) {
            *b += g;
        }
        let dpooled: Vec<f64> = (0..f)
            .map(|r| self.head.weight.row(r).iter().zip(dlogits).map(|(w, g)| w * g).sum())
            .collect();

        let c_last = spec.layers[n_layers - 1].out_channels;
        let regions = spec.pool_grid.pow(spec.m as u32);
        let per_region = (points / regions) as f64;
        // adjoint of the last layer's output jets; only its value entries exist
        let m_last = stack_len(spec.m, spec.order_in(n_layers - 1) - spec.layers[n_layers - 1].order);
        let mut dy = vec![0.0; points * m_last * c_last];
        for p in 0..points {
            let r = self.region_of(p);
            for o in 0..c_last {
                dy[p * m_last * c_last + o] = dpooled[r * c_last + o] / per_region;
            }
        }

        for l in (0..n_layers).rev() {
            let ls = spec.layers[l];
            let par = &self.layers[l];
            let t = &trace.layers[l];
            let (r_in, c_in) = (spec.order_in(l), spec.channels_in(l));
            let (m_in, m_out) = (stack_len(spec.m, r_in), stack_len(spec.m, r_in - ls.order));
            let (d_n, c_out) = (ls.filters, ls.out_channels);
            let width = c_in * d_n;

            for p in 0..points {
                for o in 0..c_out {
                    if !t.active[p * c_out + o] {
                        for j in 0..m_out {
                            dy[(p * m_out + j) * c_out + o] = 0.0;
                        }
                    }
                }
            }
            let mut dpre = dy;
            if ls.norm {
                for o in 0..c_out {
                    let s = t.scale[o];
                    let mu = t.mean[o];
                    let mut ds = 0.0;
                    let mut dy0 = 0.0;
                    for p in 0..points {
                        for j in 0..m_out {
                            let i = (p * m_out + j) * c_out + o;
                            let u = t.pre[i] - if j == 0 { mu } else { 0.0 };
                            ds -= dpre[i] * u / (s * s);
                        }
                        dy0 += dpre[p * m_out * c_out + o];
                    }
                    let dvar = ds / (2.0 * s);
                    let dmu = -dy0 / s;
                    for p in 0..points {
                        for j in 0..m_out {
                            let i = (p * m_out + j) * c_out + o;
                            dpre[i] /= s;
                            if j == 0 {
                                dpre[i] += (dvar * 2.0 * (t.pre[i] - mu) + dmu) / points as f64;
                            }
                        }
                    }
                }
            }

            let rows = points * m_out;
            let base = offsets[l];
            let n_theta = par.theta.len();
            let (gtheta, gmix) = grads[base..base + n_theta + width * c_out].split_at_mut(n_theta);
            gemm(Trans::Yes, Trans::No, width, c_out, rows, 1.0, &t.z, width, &dpre, c_out, 1.0, gmix, c_out);
            let mut dz = vec![0.0; rows * width];
            gemm(Trans::No, Trans::Yes, rows, width, c_out, 1.0, &dpre, c_out, par.mix.as_slice(), c_out, 0.0, &mut dz, width);

            let x: &[f64] = if l == 0 { &input.data } else { &trace.layers[l - 1].out };
            let shift = shift_table(spec.m, r_in, ls.order);
            let mk = shift.len();
            let need_dx = l > 0;
            let mut dx = if need_dx { vec![0.0; points * m_in * c_in] } else { Vec::new() };
            for p in 0..points {
                let xp = &x[p * m_in * c_in..(p + 1) * m_in * c_in];
                for j in 0..m_out {
                    let dzr = &dz[(p * m_out + j) * width..(p * m_out + j + 1) * width];
                    for c in 0..c_in {
                        for d in 0..d_n {
                            let g = dzr[c * d_n + d];
                            if g == 0.0 {
                                continue;
                            }
                            for n in 0..mk {
                                let xi = shift[n][j] * c_in + c;
                                gtheta[d * mk + n] += g * xp[xi];
                                if need_dx {
                                    dx[p * m_in * c_in + xi] += g * par.theta[d * mk + n];
                                }
                            }
                        }
                    }
                }
            }
            dy = dx;
        }
    }

    pub fn save(&self) -> Result<Vec<u8>> {
        let s = &self.spec;
        let u8_of = |v: usize, what: &str| u8::try_from(v).map_err(|_| Error::contract(format!("{what} exceeds u8")));
        let u16_of = |v: usize, what: &str| u16::try_from(v).map_err(|_| Error::contract(format!("{what} exceeds u16")));
        let mut buf = Vec::new();
        buf.extend_from_slice(CONVNET_MAGIC);
        buf.extend_from_slice(&CONVNET_VERSION.to_le_bytes());
        buf.push(u8_of(s.m, "dimension")?);
        buf.push(u8_of(s.in_channels, "input channels")?);
        buf.extend_from_slice(&u16_of(s.lattice, "lattice")?.to_le_bytes());
        buf.extend_from_slice(&u16_of(s.pool_grid, "pool grid")?.to_le_bytes());
        buf.extend_from_slice(&u16_of(s.classes, "classes")?.to_le_bytes());
        buf.extend_from_slice(&s.eps.to_le_bytes());
        buf.extend_from_slice(&s.coord_scale.to_le_bytes());
        buf.push(u8_of(s.layers.len(), "layer count")?);
        for l in &s.layers {
            buf.push(u8_of(l.order, "order")?);
            buf.extend_from_slice(&u16_of(l.filters, "filters")?.to_le_bytes());
            buf.extend_from_slice(&u16_of(l.out_channels, "channels")?.to_le_bytes());
            buf.push(l.norm as u8 | (l.relu as u8) << 1);
        }
        for v in self.flat_params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&buf);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let body = verify_envelope(bytes, CONVNET_MAGIC, "INSC", CONVNET_VERSION)?;
        let mut r = ByteReader::new(body, 6);
        let m = r.u8()? as usize;
        let in_channels = r.u8()? as usize;
        let lattice = r.u16()? as usize;
        let pool_grid = r.u16()? as usize;
        let classes = r.u16()? as usize;
        let eps = r.f64()?;
        let coord_scale = r.f64()?;
        let n_layers = r.u8()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let order = r.u8()? as usize;
            let filters = r.u16()? as usize;
            let out_channels = r.u16()? as usize;
            let flags = r.u8()?;
            if flags > 3 {
                return Err(Error::Header(format!("unknown layer flags {flags}")));
            }
            layers.push(ConvLayerSpec {
                order,
                filters,
                out_channels,
                norm: flags & 1 != 0,
                relu: flags & 2 != 0,
            });
        }
        let spec = ConvNetSpec {
            m,
            in_channels,
            layers,
            lattice,
            pool_grid,
            classes,
            eps,
            coord_scale,
        };
        let mut net = ConvNet::init(spec, 0).map_err(|e| Error::Header(e.to_string()))?;
        let n = net.param_count();
        let expected = r.pos() + n * 8;
        if body.len() != expected {
            return Err(Error::Header(format!(
                "spec implies {expected} bytes before checksum, file has {}",
                body.len()
            )));
        }
        let params = r.f64_vec(n)?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Header("non-finite convnet parameters".into()));
        }
        net.set_flat_params(&params)?;
        Ok(net)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `x -> inr(A x + t)`, realized on the first layer.
pub fn augment(inr: &SirenNetwork, a: &DenseMatrix, t: &[f64]) -> Result<SirenNetwork> {
    if a.rows() == 2 && a.cols() == 2 {
        let det = a.get(0, 0) * a.get(1, 1) - a.get(0, 1) * a.get(1, 0);
        if det.abs() < 1e-12 {
            return Err(Error::contract("augmentation map is singular"));
        }
    } else if a.rows() == 1 && a.cols() == 1 && a.get(0, 0).abs() < 1e-12 {
        return Err(Error::contract("augmentation map is singular"));
    }
    inr.compose_affine(a, t)
}

/// Random coordinate transforms for 2-D inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// One is drawn uniformly per sample.
    pub rotations_deg: Vec<f64>,
    pub zoom: (f64, f64),
    pub max_shift: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotations_deg: vec![-10.0, 0.0, 10.0],
            zoom: (0.9, 1.1),
            max_shift: 0.1,
        }
    }
}

impl AugmentConfig {
    fn sample<R: Rng>(&self, rng: &mut R) -> (DenseMatrix, Vec<f64>) {
        let angle = self.rotations_deg[rng.random_range(0..self.rotations_deg.len())];
        let zoom = if self.zoom.0 < self.zoom.1 {
            rng.random_range(self.zoom.0..self.zoom.1)
        } else {
            self.zoom.0
        };
        let mut a = rotation2(angle.to_radians());
        a.as_mut_slice().iter_mut().for_each(|v| *v *= zoom);
        let t = (0..2)
            .map(|_| {
                if self.max_shift > 0.0 {
                    rng.random_range(-self.max_shift..self.max_shift)
                } else {
                    0.0
                }
            })
            .collect();
        (a, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamWConfig,
    pub seed: u64,
    pub augment: Option<AugmentConfig>,
    pub engine: JetEngine,
}

impl Default for ConvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamWConfig {
                lr: 1e-2,
                ..Default::default()
            },
            seed: 0,
            augment: None,
            engine: JetEngine::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvNetFit {
    pub net: ConvNet,
    pub history: Vec<EpochStats>,
}

pub fn accuracy(net: &ConvNet, inputs: &[InputJets], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut hits = 0;
    for (x, &y) in inputs.iter().zip(labels) {
        if net.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / inputs.len() as f64)
}

/// Minibatch AdamW on cross-entropy. Input networks are only read.
/// Training accuracy is measured on each batch before its update.
pub fn train_convnet(
    train: &[(SirenNetwork, usize)],
    test: &[(SirenNetwork, usize)],
    spec: &ConvNetSpec,
    cfg: &ConvTrainConfig,
) -> Result<ConvNetFit> {
    train_convnet_observed(train, test, spec, cfg, &mut |_| {})
}

/// [`train_convnet`] reporting each epoch as it completes.
pub fn train_convnet_observed(
    train: &[(SirenNetwork, usize)],
    test: &[(SirenNetwork, usize)],
    spec: &ConvNetSpec,
    cfg: &ConvTrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<ConvNetFit> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    if cfg.augment.is_some() && spec.m != 2 {
        return Err(Error::contract("augmentation is defined for 2-D inputs"));
    }
    let seeds = SeedTree::new(cfg.seed);
    let mut net = ConvNet::init(spec.clone(), seeds.child(0).seed())?;
    let jets = |set: &[(SirenNetwork, usize)]| {
        set.iter()
            .map(|(n, _)| input_jets(spec, &cfg.engine, n))
            .collect::<Result<Vec<_>>>()
    };
    let train_y: Vec<usize> = train.iter().map(|p| p.1).collect();
    let test_y: Vec<usize> = test.iter().map(|p| p.1).collect();
    let fixed_train = if cfg.augment.is_none() { jets(train)? } else { Vec::new() };
    let test_x = jets(test)?;
    let layout = net.param_layout();
    let mut params = net.flat_params();
    let mut state = OptimizerState::new(params.len(), cfg.adam);
    let mut order_rng = seeds.stream(1);
    let mut aug_rng = seeds.stream(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let augmented: Vec<InputJets> = match &cfg.augment {
                Some(aug) => batch
                    .iter()
                    .map(|&i| {
                        let (a, t) = aug.sample(&mut aug_rng);
                        input_jets(spec, &cfg.engine, &augment(&train[i].0, &a, &t)?)
                    })
                    .collect::<Result<_>>()?,
                None => Vec::new(),
            };
            let xs: Vec<&InputJets> = if cfg.augment.is_some() {
                augmented.iter().collect()
            } else {
                batch.iter().map(|&i| &fixed_train[i]).collect()
            };
            let ys: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (loss, grads, correct) = net.loss_grad_counted(&xs, &ys).map_err(|e| match e {
                Error::Divergence { loss, .. } => Error::Divergence {
                    step: state.step_count() as usize,
                    loss,
                },
                e => e,
            })?;
            loss_sum += loss * batch.len() as f64;
            hits += correct;
            adamw_step(&mut params, &grads, &mut state, Some(&layout))?;
            net.set_flat_params(&params)?;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            test_acc: accuracy(&net, &test_x, &test_y)?,
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(ConvNetFit { net, history })
}

/// `epoch,train_loss,train_acc,test_acc` with a header row.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,test_acc\n");
    for h in history {
        let _ = writeln!(s, "{},{:.9},{:.6},{:.6}", h.epoch, h.train_loss, h.train_acc, h.test_acc);
    }
    s
}
