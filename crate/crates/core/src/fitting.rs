//! Fitting SIREN networks to point samples with hand-written backprop.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::inr::{build_siren, SirenNetwork, DEFAULT_OMEGA0};
use crate::numerics::{adamw_step, gemm, AdamWConfig, OptimizerState, SeedTree, Trans};

/// Point observations `(x_j, a_j)` with `x_j` in `[-1, 1]^m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSet {
    m: usize,
    c: usize,
    coords: Vec<f64>,
    targets: Vec<f64>,
}

impl ConstraintSet {
    pub fn new(m: usize, c: usize, coords: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if m == 0 || c == 0 {
            return Err(Error::contract("constraint dimensions must be positive"));
        }
        if coords.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !coords.len().is_multiple_of(m) || targets.len() != coords.len() / m * c {
            return Err(Error::contract(format!(
                "{} coordinates of dimension {m} do not match {} targets of {c} channels",
                coords.len(),
                targets.len()
            )));
        }
        if coords.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::contract("constraint coordinates must lie in [-1, 1]"));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("constraint targets must be finite"));
        }
        Ok(Self {
            m,
            c,
            coords,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.m
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn gather(&self, idx: &[usize], coords: &mut Vec<f64>, targets: &mut Vec<f64>) {
        coords.clear();
        targets.clear();
        for &i in idx {
            coords.extend_from_slice(&self.coords[i * self.m..(i + 1) * self.m]);
            targets.extend_from_slice(&self.targets[i * self.c..(i + 1) * self.c]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub omega0: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![128; 4],
            omega0: DEFAULT_OMEGA0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// `None` trains on the full set each step.
    pub batch_size: Option<usize>,
    pub adam: AdamWConfig,
    pub seed: u64,
    /// Stop as soon as the full-batch PSNR (on `[0, 1]` intensities) reaches
    /// this value.
    pub early_stop_psnr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: None,
            adam: AdamWConfig::default(),
            seed: 0,
            early_stop_psnr: None,
        }
    }
}

/// Mean squared error over a batch together with its parameter gradient,
/// laid out like [`SirenNetwork::flat_params`].
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<f64>,
}

/// Exact gradient of `(1/n) sum_j |net(x_j) - a_j|^2` by a batched
/// reverse sweep.
pub fn param_gradients(net: &SirenNetwork, coords: &[f64], targets: &[f64]) -> Result<LossGrad> {
    let m = net.input_dim();
    let c = net.output_dim();
    if coords.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !coords.len().is_multiple_of(m) || targets.len() != coords.len() / m * c {
        return Err(Error::contract("batch coordinates and targets disagree in length"));
    }
    let n = coords.len() / m;
    let layers = net.layers();

    // inputs[i] feeds layer i; derivs[i] holds d sigma/dz for sine layers
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut derivs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut h = coords.to_vec();
    for (i, l) in layers.iter().enumerate() {
        let out = l.fan_out();
        let mut z = vec![0.0; n * out];
        for row in z.chunks_exact_mut(out) {
            row.copy_from_slice(&l.bias);
        }
        gemm(
            Trans::No,
            Trans::No,
            n,
            out,
            l.fan_in(),
            1.0,
            &h,
            l.fan_in(),
            l.weight.as_slice(),
            out,
            1.0,
            &mut z,
            out,
        );
        if net.is_sine_layer(i) {
            let s = net.sine_scale(i);
            let mut d = vec![0.0; z.len()];
            for (zj, dj) in z.iter_mut().zip(d.iter_mut()) {
                let (sn, cs) = (s * *zj).sin_cos();
                *zj = sn;
                *dj = s * cs;
            }
            derivs.push(d);
        } else {
            derivs.push(Vec::new());
        }
        inputs.push(std::mem::replace(&mut h, z));
    }

    let mut g = vec![0.0; n * c];
    let mut loss = 0.0;
    for ((gj, &y), &a) in g.iter_mut().zip(&h).zip(targets) {
        let r = y - a;
        loss += r * r;
        *gj = 2.0 * r / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }

    let mut grads = vec![0.0; net.param_count()];
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in layers {
        offsets.push(off);
        off += l.fan_in() * l.fan_out() + l.fan_out();
    }
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        let (fi, fo) = (l.fan_in(), l.fan_out());
        if net.is_sine_layer(i) {
            for (gj, dj) in g.iter_mut().zip(&derivs[i]) {
                *gj *= dj;
            }
        }
        let (wg, bg) = grads[offsets[i]..offsets[i] + fi * fo + fo].split_at_mut(fi * fo);
        gemm(Trans::Yes, Trans::No, fi, fo, n, 1.0, &inputs[i], fi, &g, fo, 0.0, wg, fo);
        for row in g.chunks_exact(fo) {
            for (b, v) in bg.iter_mut().zip(row) {
                *b += v;
            }
        }
        if i > 0 {
            let mut prev = vec![0.0; n * fi];
            gemm(Trans::No, Trans::Yes, n, fi, fo, 1.0, &g, fo, l.weight.as_slice(), fo, 0.0, &mut prev, fi);
            g = prev;
        }
    }
    Ok(LossGrad { loss, grads })
}

/// PSNR in dB of a mean squared error measured on `[-1, 1]` values, reported
/// on the `[0, 1]` intensity scale.
pub fn psnr_from_signed_mse(mse_per_sample: f64) -> f64 {
    if mse_per_sample == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / mse_per_sample).log10()
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Parameters at the lowest observed loss.
    pub net: SirenNetwork,
    /// Loss before each update.
    pub history: Vec<f64>,
    pub best_loss: f64,
}

/// Fits a fresh SIREN to `data` with AdamW.
pub fn fit_inr(data: &ConstraintSet, arch: &Architecture, cfg: &TrainConfig) -> Result<FitResult> {
    let seeds = SeedTree::new(cfg.seed);
    let net = build_siren(data.m, data.c, &arch.hidden, arch.omega0, seeds.child(0).seed())?;
    fit_from(net, data, cfg)
}

/// Continues training `net` on `data`.
pub fn fit_from(net: SirenNetwork, data: &ConstraintSet, cfg: &TrainConfig) -> Result<FitResult> {
    fit_observed(net, data, cfg, &mut |_, _| {})
}

/// [`fit_from`] reporting `(step, loss)` before every update.
pub fn fit_observed(
    mut net: SirenNetwork,
    data: &ConstraintSet,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<FitResult> {
    if cfg.steps == 0 {
        return Err(Error::contract("training needs at least one step"));
    }
    if net.input_dim() != data.m || net.output_dim() != data.c {
        return Err(Error::contract("network shape does not match the constraint set"));
    }
    let n = data.len();
    let batch = match cfg.batch_size {
        Some(b) if b == 0 || b > n => {
            return Err(Error::contract(format!("batch size {b} outside 1..={n}")));
        }
        Some(b) if b < n => Some(b),
        _ => None,
    };
    let mut rng = SeedTree::new(cfg.seed).stream(1);
    let layout = net.param_layout();
    let mut params = net.flat_params();
    let mut state = OptimizerState::new(params.len(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.steps);
    let mut best = (f64::INFINITY, params.clone());
    let (mut bx, mut by) = (Vec::new(), Vec::new());

    for step in 0..cfg.steps {
        net.set_flat_params(&params)?;
        let lg = match batch {
            None => param_gradients(&net, &data.coords, &data.targets),
            Some(b) => {
                let idx = sample(&mut rng, n, b).into_vec();
                data.gather(&idx, &mut bx, &mut by);
                param_gradients(&net, &bx, &by)
            }
        }
        .map_err(|e| match e {
            Error::Divergence { loss, .. } => Error::Divergence { step, loss },
            other => other,
        })?;
        history.push(lg.loss);
        on_step(step, lg.loss);
        if lg.loss < best.0 {
            best.0 = lg.loss;
            best.1.copy_from_slice(&params);
        }
        if let Some(target) = cfg.early_stop_psnr {
            if batch.is_none() && psnr_from_signed_mse(lg.loss / data.c as f64) >= target {
                break;
            }
        }
        adamw_step(&mut params, &lg.grads, &mut state, Some(&layout))?;
    }
    net.set_flat_params(&best.1)?;
    Ok(FitResult {
        net,
        history,
        best_loss: best.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::Layer;
    use crate::numerics::DenseMatrix;

    fn fd_grad(net: &SirenNetwork, x: &[f64], a: &[f64], idx: usize, h: f64) -> f64 {
        let mut p = net.flat_params();
        let base = p[idx];
        let mut eval = |v: f64| {
            p[idx] = v;
            let mut n2 = net.clone();
            n2.set_flat_params(&p).unwrap();
            param_gradients(&n2, x, a).unwrap().loss
        };
        (eval(base + h) - eval(base - h)) / (2.0 * h)
    }

    #[test]
    fn zero_gradient_at_exact_targets() {
        let net = build_siren(2, 2, &[8, 8], 30.0, 4).unwrap();
        let x = vec![0.1, 0.2, -0.5, 0.9];
        let y = net.forward_batch(&x).unwrap();
        let lg = param_gradients(&net, &x, &y).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn one_neuron_outer_weight() {
        let (w, b, v, om) = (0.7, 0.1, -1.3, 2.0);
        let net = SirenNetwork::from_layers(
            om,
            vec![
                Layer {
                    weight: DenseMatrix::from_vec(1, 1, vec![w]).unwrap(),
                    bias: vec![b],
                },
                Layer {
                    weight: DenseMatrix::from_vec(1, 1, vec![v]).unwrap(),
                    bias: vec![0.0],
                },
            ],
        )
        .unwrap();
        let (x, a) = (0.4, 0.25);
        let phi = v * (om * (w * x + b)).sin();
        let lg = param_gradients(&net, &[x], &[a]).unwrap();
        // flat order: w, b, v, bias2
        let expect = 2.0 * (phi - a) * (om * (w * x + b)).sin();
        assert!((lg.grads[2] - expect).abs() < 1e-14);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = build_siren(2, 3, &[12, 10], 30.0, 9).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin()).collect();
        let a: Vec<f64> = (0..15).map(|i| (i as f64 * 0.11).cos() * 0.5).collect();
        let lg = param_gradients(&net, &x, &a).unwrap();
        let mut pick = SeedTree::new(3).stream(0);
        let idx = sample(&mut pick, net.param_count(), 20).into_vec();
        for i in idx {
            let fd = fd_grad(&net, &x, &a, i, 1e-6);
            let err = (lg.grads[i] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-6, "param {i}: {} vs {fd}", lg.grads[i]);
        }
    }

    #[test]
    fn constant_signal_fits() {
        let coords: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect();
        let data = ConstraintSet::new(1, 1, coords, vec![0.5; 64]).unwrap();
        let arch = Architecture {
            hidden: vec![16, 16],
            omega0: 30.0,
        };
        let cfg = TrainConfig {
            steps: 500,
            adam: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let fit = fit_inr(&data, &arch, &cfg).unwrap();
        assert!(fit.best_loss < 1e-4, "{}", fit.best_loss);
        let again = fit_inr(&data, &arch, &cfg).unwrap();
        assert_eq!(fit.history, again.history);
    }

    #[test]
    fn minibatch_is_seeded() {
        let coords: Vec<f64> = (0..50).map(|i| -1.0 + 2.0 * i as f64 / 49.0).collect();
        let targets: Vec<f64> = coords.iter().map(|x| (3.0 * x).sin()).collect();
        let data = ConstraintSet::new(1, 1, coords, targets).unwrap();
        let arch = Architecture {
            hidden: vec![8],
            omega0: 30.0,
        };
        let cfg = TrainConfig {
            steps: 20,
            batch_size: Some(16),
            seed: 5,
            ..Default::default()
        };
        let a = fit_inr(&data, &arch, &cfg).unwrap();
        let b = fit_inr(&data, &arch, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        let c = fit_inr(&data, &arch, &TrainConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(matches!(ConstraintSet::new(1, 1, vec![], vec![]), Err(Error::EmptyDataset)));
        assert!(ConstraintSet::new(1, 1, vec![1.5], vec![0.0]).is_err());
        assert!(ConstraintSet::new(1, 1, vec![0.5], vec![f64::NAN]).is_err());
    }
}
