//! Operators acting on networks through their derivative stacks.
//!
//! An operator maps the stack `(Phi, grad Phi, grad^2 Phi, ...)` at a point
//! to an output value. Applying it pointwise to a network yields a new
//! continuous field ([`ProcessedInr`]) that is only sampled when decoded.

use rand::seq::index::sample;

use crate::deriv::{stack_len, DerivativeStack, JetEngine, JetTables, MultiIndex};
use crate::error::{Error, Result};
use crate::fitting::TrainConfig;
use crate::inr::{verify_envelope, ByteReader, Layer, SirenNetwork};
use crate::mlp::Mlp;
use crate::numerics::{adamw_step, DenseMatrix, OptimizerState, SeedTree};
use crate::signal::{decode_with, lattice, SignalGrid};

/// Scalar remap `f` of a rotation-invariant operator `f(|stack|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Remap {
    Identity,
    Zero,
    Square,
    Log1p,
    Tanh,
}

impl Remap {
    pub fn parse(tag: &str) -> Result<Self> {
        Ok(match tag {
            "identity" => Remap::Identity,
            "zero" => Remap::Zero,
            "square" => Remap::Square,
            "log1p" => Remap::Log1p,
            "tanh" => Remap::Tanh,
            _ => return Err(Error::Capability(format!("unknown remap `{tag}`"))),
        })
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Remap::Identity => v,
            Remap::Zero => 0.0,
            Remap::Square => v * v,
            Remap::Log1p => v.ln_1p(),
            Remap::Tanh => v.tanh(),
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Remap::Identity,
            1 => Remap::Zero,
            2 => Remap::Square,
            3 => Remap::Log1p,
            4 => Remap::Tanh,
            _ => return Err(Error::Header(format!("unknown remap code {c}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    /// `theta` has `M` entries (one kernel shared by every channel) or
    /// `M * c` entries (one kernel per channel).
    Linear { theta: Vec<f64> },
    /// Input width `M` applies the MLP to each channel's stack separately;
    /// width `M * c` consumes all channels at once.
    Fusion(Mlp),
    /// Euclidean norm of the first-order partials, averaged over channels.
    GradientMagnitude,
    /// `f(sqrt(sum_k |grad^k Phi|_F^2))` per channel.
    RotationInvariant(Remap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InspOperator {
    pub m: usize,
    pub order: usize,
    pub kind: OperatorKind,
}

/// `theta . stack` per channel.
pub fn apply_linear(theta: &[f64], stack: &DerivativeStack) -> Result<Vec<f64>> {
    let ml = stack.len_per_channel();
    let c = stack.channels();
    let shared = theta.len() == ml;
    if !shared && theta.len() != ml * c {
        return Err(Error::contract(format!(
            "kernel of length {} does not fit a stack of {c} x {ml}",
            theta.len()
        )));
    }
    Ok((0..c)
        .map(|ch| {
            let t = if shared { theta } else { &theta[ch * ml..(ch + 1) * ml] };
            t.iter().zip(stack.channel(ch)).map(|(a, b)| a * b).sum()
        })
        .collect())
}

pub fn apply_fusion(mlp: &Mlp, stack: &DerivativeStack) -> Result<Vec<f64>> {
    let ml = stack.len_per_channel();
    let c = stack.channels();
    if mlp.input_width() == ml {
        if mlp.output_width() != 1 {
            return Err(Error::contract("a per-channel fusion MLP must have one output"));
        }
        Ok((0..c).map(|ch| mlp.forward(stack.channel(ch))[0]).collect())
    } else if mlp.input_width() == ml * c {
        Ok(mlp.forward(stack.as_slice()))
    } else {
        Err(Error::contract(format!(
            "fusion MLP input width {} fits neither {ml} nor {}",
            mlp.input_width(),
            ml * c
        )))
    }
}

impl InspOperator {
    pub fn linear(m: usize, order: usize, theta: Vec<f64>) -> Self {
        Self {
            m,
            order,
            kind: OperatorKind::Linear { theta },
        }
    }

    pub fn identity(m: usize) -> Self {
        Self::linear(m, 0, vec![1.0])
    }

    /// Sum of the pure second partials.
    pub fn laplacian(m: usize) -> Self {
        let t = JetTables::get(m, 2);
        let mut theta = vec![0.0; t.len()];
        for i in 0..m {
            let mut e = vec![0u8; m];
            e[i] = 2;
            theta[t.index_of(&MultiIndex::new(e)).unwrap()] = 1.0;
        }
        Self::linear(m, 2, theta)
    }

    /// Edge detector: `Components` sums the first-order partials with unit
    /// weights, `Magnitude` takes their Euclidean norm.
    pub fn edge_detector(m: usize, mode: EdgeMode) -> Self {
        match mode {
            EdgeMode::Components => {
                let mut theta = vec![0.0; stack_len(m, 1)];
                theta[1..].fill(1.0);
                Self::linear(m, 1, theta)
            }
            EdgeMode::Magnitude => Self {
                m,
                order: 1,
                kind: OperatorKind::GradientMagnitude,
            },
        }
    }

    pub fn rotation_invariant(m: usize, order: usize, f: Remap) -> Self {
        Self {
            m,
            order,
            kind: OperatorKind::RotationInvariant(f),
        }
    }

    /// Number of output channels for an input with `c` channels.
    pub fn output_channels(&self, c: usize) -> Result<usize> {
        let ml = stack_len(self.m, self.order);
        match &self.kind {
            OperatorKind::Linear { theta } if theta.len() == ml || theta.len() == ml * c => Ok(c),
            OperatorKind::Linear { .. } => Err(Error::contract("kernel length does not fit the channels")),
            OperatorKind::Fusion(mlp) if mlp.input_width() == ml => Ok(c),
            OperatorKind::Fusion(mlp) if mlp.input_width() == ml * c => Ok(mlp.output_width()),
            OperatorKind::Fusion(_) => Err(Error::contract("fusion width does not fit the channels")),
            OperatorKind::GradientMagnitude => Ok(1),
            OperatorKind::RotationInvariant(_) => Ok(c),
        }
    }

    pub fn apply(&self, stack: &DerivativeStack) -> Result<Vec<f64>> {
        if stack.dim() != self.m || stack.order() < self.order {
            return Err(Error::contract(format!(
                "operator needs an order-{} stack in {} dims, got order {} in {}",
                self.order,
                self.m,
                stack.order(),
                stack.dim()
            )));
        }
        let owned;
        let stack = if stack.order() == self.order {
            stack
        } else {
            owned = stack.truncate(self.order);
            &owned
        };
        match &self.kind {
            OperatorKind::Linear { theta } => apply_linear(theta, stack),
            OperatorKind::Fusion(mlp) => apply_fusion(mlp, stack),
            OperatorKind::GradientMagnitude => {
                let c = stack.channels();
                let s: f64 = (0..c)
                    .map(|ch| {
                        let g = &stack.channel(ch)[1..=self.m];
                        g.iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .sum();
                Ok(vec![s / c as f64])
            }
            OperatorKind::RotationInvariant(f) => Ok((0..stack.channels())
                .map(|ch| f.apply(stack.frobenius_sq(ch).sqrt()))
                .collect()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeMode {
    Components,
    Magnitude,
}

/// A network viewed through an operator: `x -> op(stack of net at x)`.
#[derive(Clone, Copy, Debug)]
pub struct ProcessedInr<'a> {
    pub base: &'a SirenNetwork,
    pub op: &'a InspOperator,
}

pub fn process<'a>(base: &'a SirenNetwork, op: &'a InspOperator) -> Result<ProcessedInr<'a>> {
    if base.input_dim() != op.m {
        return Err(Error::contract(format!(
            "operator works in {} dims, network in {}",
            op.m,
            base.input_dim()
        )));
    }
    op.output_channels(base.output_dim())?;
    Ok(ProcessedInr { base, op })
}

impl ProcessedInr<'_> {
    pub fn output_channels(&self) -> usize {
        self.op.output_channels(self.base.output_dim()).expect("checked in process")
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        let stack = JetEngine::default().eval(self.base, x, self.op.order)?;
        self.op.apply(&stack)
    }

    /// Values at `n` points (`n x m` row-major), `n x c_out`.
    pub fn eval_batch(&self, points: &[f64]) -> Result<Vec<f64>> {
        let batch = JetEngine::default().eval_batch(self.base, points, self.op.order)?;
        let mut out = Vec::with_capacity(batch.points * self.output_channels());
        for p in 0..batch.points {
            out.extend(self.op.apply(&batch.stack(p))?);
        }
        Ok(out)
    }

    /// Samples as intensities: `(v + 1) / 2` clamped to `[0, 1]`.
    pub fn decode(&self, shape: &[usize]) -> Result<SignalGrid> {
        if shape.len() != self.base.input_dim() {
            return Err(Error::contract("decode shape does not match the input dimension"));
        }
        decode_with(shape, self.output_channels(), |pts| self.eval_batch(pts))
    }

    /// Raw operator values on the lattice of `shape`, for outputs that are
    /// not intensities (gradient magnitudes, Laplacians).
    pub fn sample(&self, shape: &[usize]) -> Result<SignalGrid> {
        if shape.len() != self.base.input_dim() {
            return Err(Error::contract("sample shape does not match the input dimension"));
        }
        let values = self.eval_batch(&lattice(shape))?;
        SignalGrid::new(shape.to_vec(), self.output_channels(), values)
    }
}

pub fn eval_processed(p: &ProcessedInr<'_>, x: &[f64]) -> Result<Vec<f64>> {
    p.eval(x)
}

// ---------------------------------------------------------------------------
// training

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorSpec {
    /// One kernel shared by all channels.
    Linear { order: usize },
    Fusion {
        order: usize,
        hidden: Vec<usize>,
        cross_channel: bool,
    },
}

impl OperatorSpec {
    pub fn order(&self) -> usize {
        match self {
            OperatorSpec::Linear { order } | OperatorSpec::Fusion { order, .. } => *order,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OperatorFit {
    pub op: InspOperator,
    pub history: Vec<f64>,
}

struct Regression {
    features: Vec<f64>,
    targets: Vec<f64>,
    width: usize,
    outputs: usize,
}

fn build_regression(pairs: &[(SirenNetwork, SignalGrid)], order: usize, cross: bool) -> Result<Regression> {
    let (first, _) = pairs.first().ok_or(Error::EmptyDataset)?;
    let (m, c) = (first.input_dim(), first.output_dim());
    let ml = stack_len(m, order);
    let (width, outputs) = if cross { (ml * c, c) } else { (ml, 1) };
    let engine = JetEngine::default();
    let mut features = Vec::new();
    let mut targets = Vec::new();
    for (net, target) in pairs {
        if net.input_dim() != m || net.output_dim() != c {
            return Err(Error::contract("training networks differ in shape"));
        }
        if target.dims() != m || target.channels() != c {
            return Err(Error::contract("target grid does not match its network"));
        }
        // stacks never depend on the operator parameters: compute once
        let batch = engine.eval_batch(net, &target.coords(), order)?;
        features.extend_from_slice(&batch.data);
        // a per-channel sample is one channel's stack, already contiguous
        targets.extend(target.data().iter().map(|v| 2.0 * v - 1.0));
    }
    Ok(Regression {
        features,
        targets,
        width,
        outputs,
    })
}

/// Fits an operator so that `op(stack of net)` matches each target grid
/// (intensities mapped to `[-1, 1]`) on the target's lattice.
pub fn train_operator(
    pairs: &[(SirenNetwork, SignalGrid)],
    spec: &OperatorSpec,
    cfg: &TrainConfig,
) -> Result<OperatorFit> {
    if cfg.steps == 0 {
        return Err(Error::contract("training needs at least one step"));
    }
    let order = spec.order();
    let cross = matches!(spec, OperatorSpec::Fusion { cross_channel: true, .. });
    let reg = build_regression(pairs, order, cross)?;
    let n = reg.features.len() / reg.width;

    // per-feature RMS normalization, folded back into the first layer
    let mut scale = vec![0.0; reg.width];
    for row in reg.features.chunks_exact(reg.width) {
        for (s, v) in scale.iter_mut().zip(row) {
            *s += v * v;
        }
    }
    for s in &mut scale {
        let rms = (*s / n as f64).sqrt();
        *s = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
    }
    let mut x = reg.features;
    for row in x.chunks_exact_mut(reg.width) {
        for (v, s) in row.iter_mut().zip(&scale) {
            *v *= s;
        }
    }

    let seeds = SeedTree::new(cfg.seed);
    let linear = matches!(spec, OperatorSpec::Linear { .. });
    let mut model = match spec {
        OperatorSpec::Linear { .. } => Mlp::from_layers(vec![Layer {
            weight: DenseMatrix::zeros(reg.width, 1),
            bias: vec![0.0],
        }])?,
        OperatorSpec::Fusion { hidden, .. } => {
            let mut w = vec![reg.width];
            w.extend_from_slice(hidden);
            w.push(reg.outputs);
            Mlp::init(&w, seeds.child(0).seed())?
        }
    };
    let batch = match cfg.batch_size {
        Some(b) if b == 0 || b > n => return Err(Error::contract(format!("batch size {b} outside 1..={n}"))),
        Some(b) if b < n => Some(b),
        _ => None,
    };
    let mut rng = seeds.stream(1);
    let mut params = model.flat_params();
    let mut state = OptimizerState::new(params.len(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut best = (f64::INFINITY, params.clone());
    let (mut bx, mut by) = (Vec::new(), Vec::new());
    for step in 0..cfg.steps {
        model.set_flat_params(&params)?;
        let (loss, mut grads) = match batch {
            None => model.loss_grad(&x, &reg.targets, n),
            Some(b) => {
                bx.clear();
                by.clear();
                for i in sample(&mut rng, n, b) {
                    bx.extend_from_slice(&x[i * reg.width..(i + 1) * reg.width]);
                    by.extend_from_slice(&reg.targets[i * reg.outputs..(i + 1) * reg.outputs]);
                }
                model.loss_grad(&bx, &by, b)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if linear {
            *grads.last_mut().unwrap() = 0.0;
        }
        history.push(loss);
        if loss < best.0 {
            best.0 = loss;
            best.1.copy_from_slice(&params);
        }
        adamw_step(&mut params, &grads, &mut state, None)?;
    }
    model.set_flat_params(&best.1)?;
    model.fold_input_scale(&scale);
    let m = pairs[0].0.input_dim();
    let op = if linear {
        InspOperator::linear(m, order, model.layers()[0].weight.as_slice().to_vec())
    } else {
        InspOperator {
            m,
            order,
            kind: OperatorKind::Fusion(model),
        }
    };
    Ok(OperatorFit { op, history })
}

// ---------------------------------------------------------------------------
// file format

pub const OP_MAGIC: &[u8; 4] = b"INSQ";
pub const OP_VERSION: u16 = 1;

/// Serializes an operator:
///
/// ```text
/// "INSQ" | u16 version | u8 variant | u8 K | u8 m | body | u32 crc32
/// linear:    u32 len | f64 theta...
/// fusion:    u16 n_layers | u32 widths (n_layers+1) | f64 params...
/// gradient:  (empty)
/// rotation:  u8 remap
/// ```
pub fn save_operator(op: &InspOperator) -> Result<Vec<u8>> {
    let small = |v: usize, what: &str| u8::try_from(v).map_err(|_| Error::contract(format!("{what} exceeds u8")));
    let mut buf = Vec::new();
    buf.extend_from_slice(OP_MAGIC);
    buf.extend_from_slice(&OP_VERSION.to_le_bytes());
    let variant = match op.kind {
        OperatorKind::Linear { .. } => 0u8,
        OperatorKind::Fusion(_) => 1,
        OperatorKind::GradientMagnitude => 2,
        OperatorKind::RotationInvariant(_) => 3,
    };
    buf.push(variant);
    buf.push(small(op.order, "order")?);
    buf.push(small(op.m, "dimension")?);
    match &op.kind {
        OperatorKind::Linear { theta } => {
            buf.extend_from_slice(&(theta.len() as u32).to_le_bytes());
            for v in theta {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        OperatorKind::Fusion(mlp) => {
            buf.extend_from_slice(&(mlp.layers().len() as u16).to_le_bytes());
            for w in mlp.widths() {
                buf.extend_from_slice(&(w as u32).to_le_bytes());
            }
            for v in mlp.flat_params() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        OperatorKind::GradientMagnitude => {}
        OperatorKind::RotationInvariant(f) => buf.push(f.code()),
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn load_operator(bytes: &[u8]) -> Result<InspOperator> {
    let body = verify_envelope(bytes, OP_MAGIC, "INSQ", OP_VERSION)?;
    let mut r = ByteReader::new(body, 6);
    let variant = r.u8()?;
    let order = r.u8()? as usize;
    let m = r.u8()? as usize;
    if m == 0 {
        return Err(Error::Header("zero input dimension".into()));
    }
    let kind = match variant {
        0 => {
            let len = r.u32()? as usize;
            let theta = r.f64_vec(len)?;
            let ml = stack_len(m, order);
            if len == 0 || !len.is_multiple_of(ml) {
                return Err(Error::Header(format!("kernel length {len} is not a multiple of {ml}")));
            }
            OperatorKind::Linear { theta }
        }
        1 => {
            let n_layers = r.u16()? as usize;
            let widths = (0..=n_layers).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
            let mut mlp = Mlp::init(&widths, 0).map_err(|e| Error::Header(e.to_string()))?;
            let params = r.f64_vec(mlp.param_count())?;
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::Header("non-finite fusion parameters".into()));
            }
            mlp.set_flat_params(&params)?;
            OperatorKind::Fusion(mlp)
        }
        2 => OperatorKind::GradientMagnitude,
        3 => OperatorKind::RotationInvariant(Remap::from_code(r.u8()?)?),
        v => return Err(Error::Header(format!("unknown operator variant {v}"))),
    };
    if !r.is_done() {
        return Err(Error::Header("trailing bytes after operator body".into()));
    }
    Ok(InspOperator { m, order, kind })
}
