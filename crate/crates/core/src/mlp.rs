//! Small ReLU perceptrons: hidden layers use ReLU, the last layer is affine.

use crate::error::{Error, Result};
use crate::inr::Layer;
use crate::numerics::{gemm, uniform_from, DenseMatrix, SeedTree, Trans};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::contract("MLP layer widths do not chain"));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() || !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::contract("MLP layer bias/weight malformed"));
            }
        }
        Ok(Self { layers })
    }

    /// Uniform `(-sqrt(6/fan_in), sqrt(6/fan_in))` weights, zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::contract(format!("bad MLP widths {widths:?}")));
        }
        let tree = SeedTree::new(seed);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let mut rng = tree.stream(i as u64);
                Layer {
                    weight: DenseMatrix::from_vec(w[0], w[1], uniform_from(&mut rng, -bound, bound, w[0] * w[1]))
                        .expect("finite init"),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Layer::fan_out));
        w
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in() * l.fan_out() + l.fan_out()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::contract("MLP parameter count mismatch"));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.fan_in() * l.fan_out();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.fan_out();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Scales input feature `i` by `s[i]` before the first layer, in place.
    pub(crate) fn fold_input_scale(&mut self, s: &[f64]) {
        let l = &mut self.layers[0];
        let cols = l.fan_out();
        for (r, &si) in s.iter().enumerate() {
            for v in &mut l.weight.as_mut_slice()[r * cols..(r + 1) * cols] {
                *v *= si;
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weight.vec_mul(&h);
            for (zj, b) in z.iter_mut().zip(&l.bias) {
                *zj += b;
                if i < last && !(*zj > 0.0) {
                    *zj = 0.0;
                }
            }
            h = z;
        }
        h
    }

    /// Forward pass on `n` rows, keeping every layer input for backprop.
    fn forward_cached(&self, x: &[f64], n: usize) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (fi, fo) = (l.fan_in(), l.fan_out());
            let mut z = vec![0.0; n * fo];
            for row in z.chunks_exact_mut(fo) {
                row.copy_from_slice(&l.bias);
            }
            gemm(Trans::No, Trans::No, n, fo, fi, 1.0, acts.last().unwrap(), fi, l.weight.as_slice(), fo, 1.0, &mut z, fo);
            if i < last {
                for v in &mut z {
                    if !(*v > 0.0) {
                        *v = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward_batch(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward_cached(x, n).pop().unwrap()
    }

    /// Mean over rows of the squared error summed over outputs, and its
    /// parameter gradient.
    pub fn loss_grad(&self, x: &[f64], y: &[f64], n: usize) -> (f64, Vec<f64>) {
        let acts = self.forward_cached(x, n);
        let out = acts.last().unwrap();
        let mut g = vec![0.0; out.len()];
        let mut loss = 0.0;
        for ((gj, &o), &t) in g.iter_mut().zip(out).zip(y) {
            let r = o - t;
            loss += r * r;
            *gj = 2.0 * r / n as f64;
        }
        loss /= n as f64;
        let mut grads = vec![0.0; self.param_count()];
        let mut offsets = Vec::new();
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.fan_in() * l.fan_out() + l.fan_out();
        }
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let (fi, fo) = (l.fan_in(), l.fan_out());
            let (wg, bg) = grads[offsets[i]..offsets[i] + fi * fo + fo].split_at_mut(fi * fo);
            gemm(Trans::Yes, Trans::No, fi, fo, n, 1.0, &acts[i], fi, &g, fo, 0.0, wg, fo);
            for row in g.chunks_exact(fo) {
                for (b, v) in bg.iter_mut().zip(row) {
                    *b += v;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; n * fi];
                gemm(Trans::No, Trans::Yes, n, fi, fo, 1.0, &g, fo, l.weight.as_slice(), fo, 0.0, &mut prev, fi);
                // ReLU mask from the stored activation
                for (p, &a) in prev.iter_mut().zip(&acts[i]) {
                    if !(a > 0.0) {
                        *p = 0.0;
                    }
                }
                g = prev;
            }
        }
        (loss, grads)
    }
}
