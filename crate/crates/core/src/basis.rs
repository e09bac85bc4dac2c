//! Orthonormal polynomial bases for the chaos expansions.
//!
//! Both supported input distributions are standardized to zero mean and unit
//! variance. `NormalizedUniform` is uniform on [-sqrt(3), sqrt(3)] and pairs
//! with rescaled Legendre polynomials; `NormalizedGaussian` is the standard
//! normal and pairs with probabilists' Hermite polynomials. In both cases the
//! univariate family is normalized so that E[psi_a psi_b] = delta_ab, and the
//! multivariate basis is the tensor product
//!     Psi_k(xi) = prod_d psi_{k_d}(xi_d)
//! over a graded lexicographic multi-index set.
//!
//! Product integrals E[Psi_k1 Psi_k2 Psi_k3] (and quadruples) factor across
//! dimensions, so they are assembled from univariate tables computed once by
//! Gauss quadrature of sufficient order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Entries smaller than this are treated as structural zeros of the product
/// tensors; exact zeros of the families are many orders below quadrature
/// round-off for any sane degree, so the cutoff is uncritical.
pub const TENSOR_ZERO_TOL: f64 = 1e-13;

/// Refuse to enumerate the full quadruple-product tensor past this many
/// candidate entries; callers are expected to evaluate lazily over the
/// nonzero support of one variable instead.
pub const QUAD_ENUM_LIMIT: usize = 20_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    /// Uniform on [-sqrt(3), sqrt(3)], rescaled Legendre polynomials.
    NormalizedUniform,
    /// Standard normal, probabilists' Hermite polynomials.
    NormalizedGaussian,
}

impl BasisFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized_uniform" => Ok(BasisFamily::NormalizedUniform),
            "normalized_gaussian" => Ok(BasisFamily::NormalizedGaussian),
            other => Err(Error::Input(format!(
                "unknown distribution {other:?} (expected normalized_uniform or normalized_gaussian)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BasisFamily::NormalizedUniform => "normalized_uniform",
            BasisFamily::NormalizedGaussian => "normalized_gaussian",
        }
    }

    /// Orthonormal univariate basis polynomial of the given degree.
    pub fn eval_univariate(&self, degree: usize, x: f64) -> f64 {
        match self {
            BasisFamily::NormalizedUniform => {
                // psi_d(x) = sqrt(2d+1) P_d(x / sqrt(3))
                let u = x / 3.0f64.sqrt();
                let mut p_prev = 1.0;
                if degree == 0 {
                    return 1.0;
                }
                let mut p = u;
                for k in 1..degree {
                    let kf = k as f64;
                    let next = ((2.0 * kf + 1.0) * u * p - kf * p_prev) / (kf + 1.0);
                    p_prev = p;
                    p = next;
                }
                (2.0 * degree as f64 + 1.0).sqrt() * p
            }
            BasisFamily::NormalizedGaussian => {
                // psi_d(x) = He_d(x) / sqrt(d!)
                let mut h_prev = 1.0;
                if degree == 0 {
                    return 1.0;
                }
                let mut h = x;
                let mut fact = 1.0;
                for k in 1..degree {
                    let kf = k as f64;
                    let next = x * h - kf * h_prev;
                    h_prev = h;
                    h = next;
                    fact *= kf + 1.0;
                }
                h / fact.sqrt()
            }
        }
    }

    /// Jacobi matrix off-diagonal b_k (k = 1..) of the orthonormal recurrence,
    /// in the standardized variable.
    fn recurrence_offdiag(&self, k: usize) -> f64 {
        let kf = k as f64;
        match self {
            // Legendre on [-1,1]: k / sqrt(4k^2 - 1); the sqrt(3) rescaling of
            // the variable scales the whole matrix.
            BasisFamily::NormalizedUniform => 3.0f64.sqrt() * kf / (4.0 * kf * kf - 1.0).sqrt(),
            BasisFamily::NormalizedGaussian => kf.sqrt(),
        }
    }
}

/// Univariate Gauss rule exact for polynomial integrands up to degree
/// 2*m - 1 against the family's probability measure. Node count follows the
/// "exact order plus one safety node" policy used throughout.
pub fn gauss_rule(family: BasisFamily, max_integrand_degree: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (max_integrand_degree + 2) / 2 + 1;
    let jac = faer::Mat::<f64>::from_fn(m, m, |i, j| {
        if i == j + 1 || j == i + 1 {
            family.recurrence_offdiag(i.max(j))
        } else {
            0.0
        }
    });
    let evd = jac
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("tridiagonal eigendecomposition cannot fail");
    let s = evd.S();
    let u = evd.U();
    let mut nodes = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        nodes.push(s[i]);
        weights.push(u[(0, i)] * u[(0, i)]);
    }
    (nodes, weights)
}

/// Tensorized Gauss rule over `n_dims` dimensions, exact for polynomials of
/// per-dimension degree up to `max_degree`. Node tuples are returned
/// explicitly, so the grid size is capped to keep memory bounded.
pub fn quadrature(
    family: BasisFamily,
    n_dims: usize,
    max_degree: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (nodes1, weights1) = gauss_rule(family, max_degree);
    let m = nodes1.len();
    let total = m.checked_pow(n_dims as u32).unwrap_or(usize::MAX);
    if total > QUAD_ENUM_LIMIT {
        return Err(Error::Input(format!(
            "tensorized quadrature grid has {m}^{n_dims} nodes; refusing past {QUAD_ENUM_LIMIT}"
        )));
    }
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; n_dims];
    loop {
        let mut pt = Vec::with_capacity(n_dims);
        let mut w = 1.0;
        for d in 0..n_dims {
            pt.push(nodes1[idx[d]]);
            w *= weights1[idx[d]];
        }
        nodes.push(pt);
        weights.push(w);
        // odometer increment
        let mut d = 0;
        loop {
            if d == n_dims {
                return Ok((nodes, weights));
            }
            idx[d] += 1;
            if idx[d] < m {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

/// Graded lexicographic multi-index set: all exponent tuples of total degree
/// up to `deg` over `n` dimensions, ordered by total degree first and
/// descending lexicographic order within a degree. For (n, deg) = (2, 2):
/// (0,0), (1,0), (0,1), (2,0), (1,1), (0,2).
#[derive(Debug, Clone)]
pub struct MultiIndexSet {
    pub n: usize,
    pub deg: usize,
    indices: Vec<Vec<u8>>,
    position: HashMap<Vec<u8>, usize>,
    /// sparse form of each index: (dimension, exponent) for nonzero exponents
    nonzero: Vec<Vec<(usize, u8)>>,
}

/// Number of multi-indices of total degree <= deg over n dimensions:
/// binomial(n + deg, deg).
pub fn index_set_size(n: usize, deg: usize) -> usize {
    let mut k = 1usize;
    for i in 1..=deg {
        k = k * (n + i) / i;
    }
    k
}

impl MultiIndexSet {
    pub fn new(n: usize, deg: usize) -> Self {
        assert!(n >= 1, "need at least one stochastic dimension");
        let mut indices = Vec::with_capacity(index_set_size(n, deg));
        let mut scratch = vec![0u8; n];
        for d in 0..=deg {
            Self::compositions(d, 0, &mut scratch, &mut indices);
        }
        let mut position = HashMap::with_capacity(indices.len());
        let mut nonzero = Vec::with_capacity(indices.len());
        for (k, idx) in indices.iter().enumerate() {
            position.insert(idx.clone(), k);
            nonzero.push(
                idx.iter()
                    .enumerate()
                    .filter(|(_, &e)| e > 0)
                    .map(|(d, &e)| (d, e))
                    .collect(),
            );
        }
        MultiIndexSet {
            n,
            deg,
            indices,
            position,
            nonzero,
        }
    }

    /// Emit all tuples with `remaining` total degree distributed over
    /// dimensions `dim..`, largest leading exponent first (descending lex).
    fn compositions(remaining: usize, dim: usize, scratch: &mut [u8], out: &mut Vec<Vec<u8>>) {
        if dim == scratch.len() - 1 {
            scratch[dim] = remaining as u8;
            out.push(scratch.to_vec());
            scratch[dim] = 0;
            return;
        }
        for lead in (0..=remaining).rev() {
            scratch[dim] = lead as u8;
            Self::compositions(remaining - lead, dim + 1, scratch, out);
        }
        scratch[dim] = 0;
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn index(&self, k: usize) -> &[u8] {
        &self.indices[k]
    }

    pub fn position_of(&self, idx: &[u8]) -> Option<usize> {
        self.position.get(idx).copied()
    }

    pub fn total_degree(&self, k: usize) -> usize {
        self.indices[k].iter().map(|&e| e as usize).sum()
    }

    /// Number of indices with total degree <= 1 (they always form a prefix).
    pub fn count_deg_le_1(&self) -> usize {
        self.n + 1
    }

    pub fn nonzero_exponents(&self, k: usize) -> &[(usize, u8)] {
        &self.nonzero[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> {
        self.indices.iter().map(|v| v.as_slice())
    }

    /// Evaluate all basis functions at a sample point.
    pub fn eval_basis(&self, family: BasisFamily, xi: &[f64]) -> Vec<f64> {
        assert_eq!(xi.len(), self.n);
        // univariate values psi_e(xi_d) for e = 0..deg
        let mut uni = vec![1.0; self.n * (self.deg + 1)];
        for d in 0..self.n {
            for e in 1..=self.deg {
                uni[d * (self.deg + 1) + e] = family.eval_univariate(e, xi[d]);
            }
        }
        self.nonzero
            .iter()
            .map(|nz| {
                nz.iter()
                    .map(|&(d, e)| uni[d * (self.deg + 1) + e as usize])
                    .product()
            })
            .collect()
    }
}

/// Univariate product integral tables for one family, up to a per-factor
/// degree bound. Values below [`TENSOR_ZERO_TOL`] are snapped to exact zeros.
#[derive(Debug, Clone)]
struct UnivariateTables {
    deg: usize,
    triple: Vec<f64>,
    quad: Vec<f64>,
}

impl UnivariateTables {
    fn build(family: BasisFamily, deg: usize) -> Self {
        let w = deg + 1;
        let (n3, w3) = gauss_rule(family, 3 * deg);
        let (n4, w4) = gauss_rule(family, 4 * deg);
        let psi = |nodes: &[f64]| -> Vec<Vec<f64>> {
            (0..w)
                .map(|e| nodes.iter().map(|&x| family.eval_univariate(e, x)).collect())
                .collect()
        };
        let p3 = psi(&n3);
        let p4 = psi(&n4);
        let snap = |v: f64| if v.abs() < TENSOR_ZERO_TOL { 0.0 } else { v };

        let mut triple = vec![0.0; w * w * w];
        for a in 0..w {
            for b in 0..w {
                for c in 0..w {
                    let v: f64 = (0..n3.len())
                        .map(|i| w3[i] * p3[a][i] * p3[b][i] * p3[c][i])
                        .sum();
                    triple[(a * w + b) * w + c] = snap(v);
                }
            }
        }
        let mut quad = vec![0.0; w * w * w * w];
        for a in 0..w {
            for b in 0..w {
                for c in 0..w {
                    for d in 0..w {
                        let v: f64 = (0..n4.len())
                            .map(|i| w4[i] * p4[a][i] * p4[b][i] * p4[c][i] * p4[d][i])
                            .sum();
                        quad[((a * w + b) * w + c) * w + d] = snap(v);
                    }
                }
            }
        }
        UnivariateTables { deg, triple, quad }
    }

    #[inline]
    fn triple(&self, a: u8, b: u8, c: u8) -> f64 {
        let w = self.deg + 1;
        self.triple[(a as usize * w + b as usize) * w + c as usize]
    }

    #[inline]
    fn quad(&self, a: u8, b: u8, c: u8, d: u8) -> f64 {
        let w = self.deg + 1;
        self.quad[((a as usize * w + b as usize) * w + c as usize) * w + d as usize]
    }
}

/// Triple products ( E[Psi_k1 Psi_k2 Psi_k3] ) stored per target index k3,
/// plus univariate tables for lazy quadruple products.
#[derive(Debug, Clone)]
pub struct ProductTensors {
    pub family: BasisFamily,
    pub set: MultiIndexSet,
    /// per target k: all ordered source pairs (k1, k2) with nonzero value
    pairs: Vec<Vec<(u32, u32, f64)>>,
    uni: UnivariateTables,
}

impl ProductTensors {
    pub fn build(family: BasisFamily, set: &MultiIndexSet) -> Self {
        let uni = UnivariateTables::build(family, set.deg);
        let kk = set.len();
        let mut pairs = vec![Vec::new(); kk];
        // The product Psi_k1 Psi_k2 can only project onto targets whose
        // exponent in each dimension lies in the selection band
        // |a-b|, |a-b|+2, ..., a+b. Enumerating those few candidates instead
        // of scanning all K targets keeps the build quadratic in K.
        let mut candidates: Vec<Vec<u8>> = Vec::new();
        for k1 in 0..kk {
            for k2 in k1..kk {
                let (i1, i2) = (set.index(k1), set.index(k2));
                candidates.clear();
                candidates.push(vec![0u8; set.n]);
                for d in 0..set.n {
                    let (a, b) = (i1[d], i2[d]);
                    if a == 0 && b == 0 {
                        continue;
                    }
                    let lo = a.abs_diff(b);
                    let hi = (a + b).min(set.deg as u8);
                    let prev = std::mem::take(&mut candidates);
                    for base in prev {
                        let mut c = lo;
                        while c <= hi {
                            let mut next = base.clone();
                            next[d] = c;
                            candidates.push(next);
                            c += 2;
                        }
                    }
                }
                for cand in &candidates {
                    let total: usize = cand.iter().map(|&e| e as usize).sum();
                    if total > set.deg {
                        continue;
                    }
                    let Some(k3) = set.position_of(cand) else {
                        continue;
                    };
                    let v = Self::triple_value(&uni, set, k1, k2, k3);
                    if v != 0.0 {
                        pairs[k3].push((k1 as u32, k2 as u32, v));
                        if k1 != k2 {
                            pairs[k3].push((k2 as u32, k1 as u32, v));
                        }
                    }
                }
            }
        }
        for p in &mut pairs {
            p.sort_unstable_by_key(|&(a, b, _)| (a, b));
        }
        ProductTensors {
            family,
            set: set.clone(),
            pairs,
            uni,
        }
    }

    fn triple_value(
        uni: &UnivariateTables,
        set: &MultiIndexSet,
        k1: usize,
        k2: usize,
        k3: usize,
    ) -> f64 {
        let (i1, i2, i3) = (set.index(k1), set.index(k2), set.index(k3));
        let mut v = 1.0;
        for d in 0..set.n {
            if i1[d] == 0 && i2[d] == 0 && i3[d] == 0 {
                continue;
            }
            v *= uni.triple(i1[d], i2[d], i3[d]);
            if v == 0.0 {
                return 0.0;
            }
        }
        if v.abs() < TENSOR_ZERO_TOL {
            0.0
        } else {
            v
        }
    }

    /// Ordered source pairs (k1, k2, value) projecting onto target k.
    pub fn pairs(&self, k: usize) -> &[(u32, u32, f64)] {
        &self.pairs[k]
    }

    pub fn triple(&self, k1: usize, k2: usize, k3: usize) -> f64 {
        Self::triple_value(&self.uni, &self.set, k1, k2, k3)
    }

    /// Quadruple product E[Psi_k1 Psi_k2 Psi_k3 Psi_k4], evaluated lazily.
    pub fn quad(&self, k1: usize, k2: usize, k3: usize, k4: usize) -> f64 {
        let set = &self.set;
        let (i1, i2, i3, i4) = (
            set.index(k1),
            set.index(k2),
            set.index(k3),
            set.index(k4),
        );
        let mut v = 1.0;
        for d in 0..set.n {
            if i1[d] == 0 && i2[d] == 0 && i3[d] == 0 && i4[d] == 0 {
                continue;
            }
            v *= self.uni.quad(i1[d], i2[d], i3[d], i4[d]);
            if v == 0.0 {
                return 0.0;
            }
        }
        if v.abs() < TENSOR_ZERO_TOL {
            0.0
        } else {
            v
        }
    }

    /// Dense enumeration of the quadruple tensor, intended for small sets
    /// only. Errors out instead of allocating an unreasonable table.
    pub fn quad_full(&self) -> Result<Vec<f64>> {
        let kk = self.set.len();
        let total = kk * kk * kk * kk;
        if total > QUAD_ENUM_LIMIT {
            return Err(Error::Input(format!(
                "full quadruple tensor has {kk}^4 = {total} entries; evaluate lazily instead"
            )));
        }
        let mut out = vec![0.0; total];
        for k1 in 0..kk {
            for k2 in 0..kk {
                for k3 in 0..kk {
                    for k4 in 0..kk {
                        out[((k1 * kk + k2) * kk + k3) * kk + k4] = self.quad(k1, k2, k3, k4);
                    }
                }
            }
        }
        Ok(out)
    }
}
