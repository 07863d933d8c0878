use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Exponent tuple `n` of a mixed partial `d^|n| / dx_1^n_1 ... dx_m^n_m`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex(Vec<u8>);

impl MultiIndex {
    pub fn new(exponents: Vec<u8>) -> Self {
        Self(exponents)
    }

    pub fn zero(m: usize) -> Self {
        Self(vec![0; m])
    }

    pub fn unit(m: usize, axis: usize) -> Self {
        let mut e = vec![0; m];
        e[axis] = 1;
        Self(e)
    }

    pub fn exponents(&self) -> &[u8] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Total order `|n|`.
    pub fn order(&self) -> usize {
        self.0.iter().map(|&e| e as usize).sum()
    }

    /// `n! = n_1! ... n_m!`
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&e| factorial(e as usize)).product()
    }

    /// Number of ordered index tuples `(i_1..i_k)` that collapse onto this
    /// multi-index, `|n|! / n!`.
    pub fn multiplicity(&self) -> f64 {
        factorial(self.order()) / self.factorial()
    }

    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `x^n` for a point `x`.
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Stack length `M = sum_{k=0}^{K} C(k+m-1, k) = (K+1) C(K+m, K+1) / m`.
pub fn stack_len(m: usize, order: usize) -> usize {
    (order + 1) * binomial(order + m, order + 1) / m
}

/// All multi-indices with `|n| <= K` in graded order: ascending total
/// order, and within one order the first exponent descends, e.g. for m=2
/// `(0,0) (1,0) (0,1) (2,0) (1,1) (0,2)`.
pub fn multi_index_set(m: usize, order: usize) -> Vec<MultiIndex> {
    let mut out = Vec::with_capacity(stack_len(m, order));
    for k in 0..=order {
        let mut cur = vec![0u8; m];
        push_compositions(&mut out, &mut cur, 0, k);
    }
    out
}

fn push_compositions(out: &mut Vec<MultiIndex>, cur: &mut Vec<u8>, axis: usize, remaining: usize) {
    let m = cur.len();
    if axis == m - 1 {
        cur[axis] = remaining as u8;
        out.push(MultiIndex(cur.clone()));
        return;
    }
    for e in (0..=remaining).rev() {
        cur[axis] = e as u8;
        push_compositions(out, cur, axis + 1, remaining - e);
    }
    cur[axis] = 0;
}

/// Precomputed index arithmetic for truncated Taylor jets in `m` variables
/// up to order `K`.
///
/// Because the ordering is graded, the tables for a lower order are a prefix
/// of those for a higher one, so jets of different truncation orders share
/// index positions.
#[derive(Debug)]
pub struct JetTables {
    pub m: usize,
    pub order: usize,
    pub indices: Vec<MultiIndex>,
    pub orders: Vec<usize>,
    /// `n!` per index.
    pub factorials: Vec<f64>,
    /// `(a, b, a+b)` for every pair with `|a| + |b| <= K`.
    pub products: Vec<(u32, u32, u32)>,
    lookup: HashMap<MultiIndex, usize>,
}

impl JetTables {
    fn build(m: usize, order: usize) -> Self {
        let indices = multi_index_set(m, order);
        let lookup: HashMap<_, _> = indices
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        let orders: Vec<usize> = indices.iter().map(MultiIndex::order).collect();
        let factorials = indices.iter().map(MultiIndex::factorial).collect();
        let mut products = Vec::new();
        for (ia, a) in indices.iter().enumerate() {
            for (ib, b) in indices.iter().enumerate() {
                if orders[ia] + orders[ib] <= order {
                    let ic = lookup[&a.add(b)];
                    products.push((ia as u32, ib as u32, ic as u32));
                }
            }
        }
        Self {
            m,
            order,
            indices,
            orders,
            factorials,
            products,
            lookup,
        }
    }

    /// Shared tables for `(m, K)`.
    pub fn get(m: usize, order: usize) -> Arc<JetTables> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<JetTables>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((m, order))
            .or_insert_with(|| Arc::new(JetTables::build(m, order)))
            .clone()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index_of(&self, n: &MultiIndex) -> Option<usize> {
        self.lookup.get(n).copied()
    }

    /// Number of entries with order `<= k`.
    pub fn len_upto(&self, k: usize) -> usize {
        stack_len(self.m, k.min(self.order))
    }

    /// Entries `(src, dst, factor)` such that the Taylor coefficients of
    /// `D^n f`, truncated at order `K - |n|`, are
    /// `out[dst] += factor * jet[src]`.
    pub fn derivative_shift(&self, n: &MultiIndex) -> Vec<(usize, usize, f64)> {
        let k = n.order();
        assert!(k <= self.order);
        let keep = self.len_upto(self.order - k);
        (0..keep)
            .map(|dst| {
                let b = &self.indices[dst];
                let src = self.lookup[&b.add(n)];
                // (b+n)!/b!
                (src, dst, self.factorials[src] / self.factorials[dst])
            })
            .collect()
    }
}
