//! Truncated multivariate Taylor arithmetic.
//!
//! Coefficients use the Taylor convention: the entry at multi-index `n` is
//! `(1/n!) d^n f`. Internally the kernels work on "laned" jets, a row-major
//! `M x L` block holding `L` independent jets that share one index table, so
//! a whole network layer is propagated with contiguous inner loops.

use std::sync::Arc;

use super::multi_index::{JetTables, MultiIndex};
use crate::error::{Error, Result};

/// `out = a * b` truncated, on `M x L` laned blocks.
pub(crate) fn mul_lanes(t: &JetTables, a: &[f64], b: &[f64], out: &mut [f64], lanes: usize) {
    out.fill(0.0);
    for &(ia, ib, ic) in &t.products {
        let (ia, ib, ic) = (ia as usize, ib as usize, ic as usize);
        let ra = &a[ia * lanes..(ia + 1) * lanes];
        let rb = &b[ib * lanes..(ib + 1) * lanes];
        let rc = &mut out[ic * lanes..(ic + 1) * lanes];
        for ((c, &x), &y) in rc.iter_mut().zip(ra).zip(rb) {
            *c += x * y;
        }
    }
}

/// Scratch buffers reused across laned compositions.
#[derive(Default)]
pub(crate) struct Scratch {
    acc: Vec<f64>,
    tmp: Vec<f64>,
    derivs: Vec<f64>,
}

/// In place `u <- sin(scale * u)` on an `M x L` block.
///
/// Uses `sin(u0 + d) = sum_j sin(u0 + j pi/2) d^j / j!` evaluated by Horner's
/// rule in the nilpotent part `d`.
pub(crate) fn sin_lanes(t: &JetTables, u: &mut [f64], lanes: usize, scale: f64, s: &mut Scratch) {
    let m_len = t.len();
    debug_assert_eq!(u.len(), m_len * lanes);
    if scale != 1.0 {
        for v in u.iter_mut() {
            *v *= scale;
        }
    }
    let k = t.order;
    // d^j/du^j sin at u0, divided by j!
    s.derivs.clear();
    s.derivs.resize((k + 1) * lanes, 0.0);
    for l in 0..lanes {
        let (sn, cs) = u[l].sin_cos();
        let mut inv_fact = 1.0;
        for j in 0..=k {
            if j > 0 {
                inv_fact /= j as f64;
            }
            let v = match j % 4 {
                0 => sn,
                1 => cs,
                2 => -sn,
                _ => -cs,
            };
            s.derivs[j * lanes + l] = v * inv_fact;
        }
    }
    if k == 0 {
        u[..lanes].copy_from_slice(&s.derivs[..lanes]);
        return;
    }
    // nilpotent part lives in rows 1..; zero the constant row
    u[..lanes].fill(0.0);
    s.acc.clear();
    s.acc.resize(m_len * lanes, 0.0);
    s.tmp.clear();
    s.tmp.resize(m_len * lanes, 0.0);
    s.acc[..lanes].copy_from_slice(&s.derivs[k * lanes..(k + 1) * lanes]);
    for j in (0..k).rev() {
        mul_lanes_nilpotent(t, &s.acc, u, &mut s.tmp, lanes);
        for (a, &d) in s.tmp[..lanes].iter_mut().zip(&s.derivs[j * lanes..(j + 1) * lanes]) {
            *a += d;
        }
        std::mem::swap(&mut s.acc, &mut s.tmp);
    }
    u.copy_from_slice(&s.acc);
}

/// Like [`mul_lanes`] but skips products with `b`'s constant term, which is
/// zero for the nilpotent factor.
fn mul_lanes_nilpotent(t: &JetTables, a: &[f64], b: &[f64], out: &mut [f64], lanes: usize) {
    out.fill(0.0);
    for &(ia, ib, ic) in &t.products {
        if ib == 0 {
            continue;
        }
        let (ia, ib, ic) = (ia as usize, ib as usize, ic as usize);
        let ra = &a[ia * lanes..(ia + 1) * lanes];
        let rb = &b[ib * lanes..(ib + 1) * lanes];
        let rc = &mut out[ic * lanes..(ic + 1) * lanes];
        for ((c, &x), &y) in rc.iter_mut().zip(ra).zip(rb) {
            *c += x * y;
        }
    }
}

/// In place ReLU on an `M x L` block: each lane keeps its whole jet when
/// the value is positive and is zeroed otherwise (subgradient 0 at the kink).
pub(crate) fn relu_lanes(u: &mut [f64], m_len: usize, lanes: usize) {
    for l in 0..lanes {
        if !(u[l] > 0.0) {
            for r in 0..m_len {
                u[r * lanes + l] = 0.0;
            }
        }
    }
}

/// Scalar nonlinearities a jet can be pushed through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Sine { scale: f64 },
    Relu,
    Identity,
}

impl Elementwise {
    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Self::Relu),
            "identity" => Ok(Self::Identity),
            t if t.starts_with("sine") => {
                let scale = match t.strip_prefix("sine:") {
                    Some(s) => s
                        .parse()
                        .map_err(|_| Error::Capability(format!("bad sine scale in `{t}`")))?,
                    None => 1.0,
                };
                Ok(Self::Sine { scale })
            }
            other => Err(Error::Capability(format!("unsupported nonlinearity `{other}`"))),
        }
    }
}

/// One scalar truncated Taylor expansion.
#[derive(Clone, Debug)]
pub struct Jet {
    tables: Arc<JetTables>,
    coeffs: Vec<f64>,
}

impl PartialEq for Jet {
    fn eq(&self, other: &Self) -> bool {
        self.tables.m == other.tables.m
            && self.tables.order == other.tables.order
            && self.coeffs == other.coeffs
    }
}

impl Jet {
    pub fn constant(m: usize, order: usize, value: f64) -> Self {
        let tables = JetTables::get(m, order);
        let mut coeffs = vec![0.0; tables.len()];
        coeffs[0] = value;
        Self { tables, coeffs }
    }

    /// The coordinate function `x_axis` expanded around `value`.
    pub fn variable(m: usize, order: usize, axis: usize, value: f64) -> Self {
        let mut j = Self::constant(m, order, value);
        if order >= 1 {
            j.coeffs[1 + axis] = 1.0;
        }
        j
    }

    pub fn from_taylor(m: usize, order: usize, coeffs: Vec<f64>) -> Result<Self> {
        let tables = JetTables::get(m, order);
        if coeffs.len() != tables.len() {
            return Err(Error::contract(format!(
                "jet needs {} coefficients, got {}",
                tables.len(),
                coeffs.len()
            )));
        }
        Ok(Self { tables, coeffs })
    }

    pub fn tables(&self) -> &JetTables {
        &self.tables
    }

    pub fn order(&self) -> usize {
        self.tables.order
    }

    pub fn value(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn taylor(&self) -> &[f64] {
        &self.coeffs
    }

    /// Raw partial derivatives `d^n f` in canonical order.
    pub fn partials(&self) -> Vec<f64> {
        self.coeffs
            .iter()
            .zip(&self.tables.factorials)
            .map(|(c, f)| c * f)
            .collect()
    }

    pub fn partial(&self, n: &MultiIndex) -> Option<f64> {
        let i = self.tables.index_of(n)?;
        Some(self.coeffs[i] * self.tables.factorials[i])
    }

    fn check_compatible(&self, other: &Jet) {
        assert!(
            self.tables.m == other.tables.m && self.tables.order == other.tables.order,
            "jets of different shape"
        );
    }

    pub fn add(&self, other: &Jet) -> Jet {
        self.check_compatible(other);
        let coeffs = self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b).collect();
        Jet {
            tables: self.tables.clone(),
            coeffs,
        }
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            tables: self.tables.clone(),
            coeffs: self.coeffs.iter().map(|c| c * s).collect(),
        }
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = self.clone();
        out.coeffs[0] += s;
        out
    }

    pub fn mul(&self, other: &Jet) -> Jet {
        self.check_compatible(other);
        let mut coeffs = vec![0.0; self.coeffs.len()];
        mul_lanes(&self.tables, &self.coeffs, &other.coeffs, &mut coeffs, 1);
        Jet {
            tables: self.tables.clone(),
            coeffs,
        }
    }

    pub fn apply(&self, f: Elementwise) -> Jet {
        let mut out = self.clone();
        match f {
            Elementwise::Sine { scale } => {
                let mut s = Scratch::default();
                sin_lanes(&self.tables, &mut out.coeffs, 1, scale, &mut s);
            }
            Elementwise::Relu => relu_lanes(&mut out.coeffs, self.tables.len(), 1),
            Elementwise::Identity => {}
        }
        out
    }

    /// Taylor coefficients of `D^n f`, truncated at order `K - |n|`.
    pub fn differentiate(&self, n: &MultiIndex) -> Result<Jet> {
        let k = n.order();
        if k > self.order() {
            return Err(Error::Capability(format!(
                "cannot take an order-{k} derivative of an order-{} jet",
                self.order()
            )));
        }
        let lo = JetTables::get(self.tables.m, self.order() - k);
        let mut coeffs = vec![0.0; lo.len()];
        for (src, dst, f) in self.tables.derivative_shift(n) {
            coeffs[dst] += f * self.coeffs[src];
        }
        Ok(Jet { tables: lo, coeffs })
    }
}

/// Pushes a jet through a tagged scalar nonlinearity.
pub fn jet_elementwise(jet: &Jet, f: Elementwise) -> Jet {
    jet.apply(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_branches() {
        let j = Jet::from_taylor(2, 2, vec![-2.0, 1.0, 3.0, 0.5, -1.0, 2.0]).unwrap();
        assert!(j.apply(Elementwise::Relu).taylor().iter().all(|&c| c == 0.0));
        let p = Jet::from_taylor(2, 2, vec![2.0, 1.0, 3.0, 0.5, -1.0, 2.0]).unwrap();
        assert_eq!(p.apply(Elementwise::Relu), p);
        let z = Jet::from_taylor(1, 1, vec![0.0, 1.0]).unwrap();
        assert!(z.apply(Elementwise::Relu).taylor().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn sine_of_linear_matches_hand_derivatives() {
        // h(x) = 2x at 0: sin(2x) has derivatives 0, 2, 0, -8
        let h = Jet::variable(1, 3, 0, 0.0).scale(2.0);
        let s = h.apply(Elementwise::Sine { scale: 1.0 });
        let d = s.partials();
        let expected = [0.0, 2.0, 0.0, -8.0];
        for (a, b) in d.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14, "{d:?}");
        }
    }

    #[test]
    fn sine_scale_and_offset() {
        // sin(3 (x + 0.4)) at x = 0.1: k-th derivative 3^k sin(1.5 + k pi/2)
        let u = Jet::variable(1, 4, 0, 0.1).add_scalar(0.4);
        let s = u.apply(Elementwise::Sine { scale: 3.0 });
        for (k, d) in s.partials().iter().enumerate() {
            let e = 3f64.powi(k as i32) * (1.5 + k as f64 * std::f64::consts::FRAC_PI_2).sin();
            assert!((d - e).abs() < 1e-12 * e.abs().max(1.0));
        }
    }

    #[test]
    fn product_rule_two_variables() {
        // f = x^2 y at (1, 2); d_xy f = 2x = 2, d_xx f = 2y = 4
        let x = Jet::variable(2, 3, 0, 1.0);
        let y = Jet::variable(2, 3, 1, 2.0);
        let f = x.mul(&x).mul(&y);
        let t = JetTables::get(2, 3);
        let at = |e: [u8; 2]| f.partial(&MultiIndex::new(e.to_vec())).unwrap();
        assert_eq!(at([0, 0]), 2.0);
        assert_eq!(at([1, 1]), 2.0);
        assert_eq!(at([2, 0]), 4.0);
        assert_eq!(at([2, 1]), 2.0);
        assert_eq!(at([0, 2]), 0.0);
        assert_eq!(f.taylor().len(), t.len());
    }

    #[test]
    fn differentiate_shifts_coefficients() {
        // f = x^3 + x y^2 at (0.5, -1), order 3; d_x f = 3x^2 + y^2
        let x = Jet::variable(2, 3, 0, 0.5);
        let y = Jet::variable(2, 3, 1, -1.0);
        let f = x.mul(&x).mul(&x).add(&x.mul(&y).mul(&y));
        let fx = f.differentiate(&MultiIndex::unit(2, 0)).unwrap();
        assert_eq!(fx.order(), 2);
        let p = fx.partials();
        // value, d_x, d_y, d_xx, d_xy, d_yy of 3x^2 + y^2
        let expected = [3.0 * 0.25 + 1.0, 3.0, -2.0, 6.0, 0.0, 2.0];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(f.differentiate(&MultiIndex::new(vec![2, 2])).is_err());
    }

    #[test]
    fn parse_tags() {
        assert_eq!(Elementwise::parse("relu").unwrap(), Elementwise::Relu);
        assert_eq!(
            Elementwise::parse("sine:30").unwrap(),
            Elementwise::Sine { scale: 30.0 }
        );
        assert!(matches!(Elementwise::parse("tanh"), Err(Error::Capability(_))));
    }
}
