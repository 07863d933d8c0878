//! Dense matrices, seeded random streams and the AdamW optimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Row-major dense matrix of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "matrix data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite matrix entry at {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::contract(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        gemm(
            Trans::No,
            Trans::No,
            self.rows,
            rhs.cols,
            self.cols,
            1.0,
            &self.data,
            self.cols,
            &rhs.data,
            rhs.cols,
            0.0,
            &mut out.data,
            rhs.cols,
        );
        Ok(out)
    }

    /// Row vector times matrix: `x^T A`.
    pub fn vec_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += xr * a;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major slices.
///
/// `op(A)` is `m x k`, `op(B)` is `k x n`, `C` is `m x n`. `lda`, `ldb` and
/// `ldc` are the row strides of the matrices as stored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa, a_need) = match ta {
        Trans::No => (lda, 1, if k == 0 { 0 } else { (m - 1) * lda + k }),
        Trans::Yes => (1, lda, if k == 0 { 0 } else { (k - 1) * lda + m }),
    };
    let (rsb, csb, b_need) = match tb {
        Trans::No => (ldb, 1, if k == 0 { 0 } else { (k - 1) * ldb + n }),
        Trans::Yes => (1, ldb, if k == 0 { 0 } else { (n - 1) * ldb + k }),
    };
    assert!(a.len() >= a_need, "gemm: A too short");
    assert!(b.len() >= b_need, "gemm: B too short");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm: C too short");
    // SAFETY: the asserts above bound every index touched through the
    // given strides; the three slices cannot alias since `c` is `&mut`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Splittable seeded randomness.
///
/// Every consumer asks for a named stream; the same `(seed, stream)` pair
/// always yields the same sequence regardless of what other streams were
/// drawn before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }

    /// Derives a child tree; children of distinct ids are independent.
    pub fn child(&self, id: u64) -> SeedTree {
        let mut rng = self.stream(id ^ 0x9E37_79B9_7F4A_7C15);
        SeedTree { seed: rng.random() }
    }
}

pub fn seeded_uniform(seed: u64, low: f64, high: f64, n: usize) -> Result<Vec<f64>> {
    if !(low < high) {
        return Err(Error::contract(format!(
            "seeded_uniform requires low < high, got [{low}, {high})"
        )));
    }
    let mut rng = SeedTree::new(seed).stream(0);
    Ok(uniform_from(&mut rng, low, high, n))
}

pub(crate) fn uniform_from<R: Rng>(rng: &mut R, low: f64, high: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let v = low + (high - low) * u;
            // rounding can land exactly on `high` for tiny intervals
            if v >= high {
                low
            } else {
                v
            }
        })
        .collect()
}

pub(crate) fn normal_from<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Names the contiguous blocks of a flattened parameter vector, so
/// optimizer errors can point at the offending tensor.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    blocks: Vec<(String, usize)>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, len: usize) {
        self.blocks.push((name.into(), len));
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> &[(String, usize)] {
        &self.blocks
    }

    /// `name[offset]` for a flat index.
    pub fn describe(&self, mut index: usize) -> String {
        for (name, len) in &self.blocks {
            if index < *len {
                return format!("{name}[{index}]");
            }
            index -= len;
        }
        format!("param[{index}]")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(n: usize, config: AdamWConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    layout: Option<&ParamLayout>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::contract(format!(
            "adamw_step shapes: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let name = match layout {
            Some(l) => l.describe(i),
            None => format!("param[{i}]"),
        };
        return Err(Error::NonFiniteGradient { name });
    }
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut st = OptimizerState::new(3, cfg);
        for _ in 0..5 {
            adamw_step(&mut p, &[0.0; 3], &mut st, None).unwrap();
        }
        assert_eq!(p, before);
        assert!(st.first_moment().iter().all(|&m| m == 0.0));
        assert!(st.second_moment().iter().all(|&v| v == 0.0));
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m = 0.1, v = 0.001; bias corrected both are 1, so the step is
        // lr * 1 / (1 + eps).
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut p = vec![1.0];
        let mut st = OptimizerState::new(1, cfg);
        adamw_step(&mut p, &[1.0], &mut st, None).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);

        let mut q = vec![1.0];
        let mut st = OptimizerState::new(1, AdamWConfig { weight_decay: 0.01, ..cfg });
        adamw_step(&mut q, &[1.0], &mut st, None).unwrap();
        assert!((q[0] - (expected - 0.1 * 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_and_nan_are_rejected() {
        let mut st = OptimizerState::new(2, AdamWConfig::default());
        let mut p = vec![0.0; 2];
        assert!(matches!(
            adamw_step(&mut p, &[0.0], &mut st, None),
            Err(Error::Contract(_))
        ));
        let mut layout = ParamLayout::new();
        layout.push("w", 1);
        layout.push("b", 1);
        match adamw_step(&mut p, &[0.0, f64::NAN], &mut st, Some(&layout)) {
            Err(Error::NonFiniteGradient { name }) => assert_eq!(name, "b[0]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_is_deterministic_and_bounded() {
        let a = seeded_uniform(7, 0.0, 1.0, 3).unwrap();
        let b = seeded_uniform(7, 0.0, 1.0, 3).unwrap();
        assert_eq!(a, b);
        let small = seeded_uniform(7, 0.0, 1e-4, 1000).unwrap();
        assert!(small.iter().all(|&v| (0.0..1e-4).contains(&v)));
        let c = seeded_uniform(7, 0.0, 1.0, 100).unwrap();
        let d = seeded_uniform(8, 0.0, 1.0, 100).unwrap();
        assert!(c.iter().zip(&d).any(|(x, y)| x != y));
        assert!(seeded_uniform(1, 1.0, 1.0, 2).is_err());
    }

    #[test]
    fn streams_are_order_independent() {
        let tree = SeedTree::new(42);
        let mut s1 = tree.stream(1);
        let first: f64 = s1.random();
        let mut s2 = tree.stream(2);
        let _: f64 = s2.random();
        let mut again = tree.stream(1);
        assert_eq!(first, again.random::<f64>());
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = DenseMatrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = DenseMatrix::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let ab = a.matmul(&b).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let naive: f64 = (0..4).map(|k| a.get(r, k) * b.get(k, c)).sum();
                assert!((ab.get(r, c) - naive).abs() < 1e-12);
            }
        }
        // (A B)^T = B^T A^T using the transposed code paths
        let mut c = vec![0.0; 6];
        gemm(Trans::Yes, Trans::Yes, 2, 3, 4, 1.0, b.as_slice(), 2, a.as_slice(), 4, 0.0, &mut c, 3);
        let ab_t = ab.transpose();
        for (x, y) in c.iter().zip(ab_t.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn mat(rows: usize, cols: usize) -> impl Strategy<Value = DenseMatrix> {
            proptest::collection::vec(-2.0f64..2.0, rows * cols)
                .prop_map(move |v| DenseMatrix::from_vec(rows, cols, v).unwrap())
        }

        proptest! {
            #[test]
            fn matmul_is_associative(a in mat(3, 4), b in mat(4, 5), c in mat(5, 2)) {
                let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
                let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
                let scale = left.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                    prop_assert!((x - y).abs() <= 1e-12 * scale);
                }
            }
        }
    }
}
