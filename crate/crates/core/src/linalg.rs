//! Small sparse-matrix toolkit used by the solvers.
//!
//! Assembly happens in triplet form, numerical kernels run on CSR, and the
//! actual factorizations (unsymmetric LU for Newton steps, Cholesky for
//! Gauss-Newton normal equations) are delegated to `faer`.

use crate::{Error, Result};

/// Triplet (COO) builder. Duplicate entries are summed when converting to CSR.
#[derive(Debug, Clone)]
pub struct Triplets {
    pub n_rows: usize,
    pub n_cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n_rows: usize, n_cols: usize) -> Self {
        Triplets {
            n_rows,
            n_cols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(n_rows: usize, n_cols: usize, cap: usize) -> Self {
        Triplets {
            n_rows,
            n_cols,
            entries: Vec::with_capacity(cap),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        self.entries.push((row, col, value));
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn to_csr(&self) -> Csr {
        Csr::from_triplets(self)
    }
}

/// Compressed sparse row matrix with sorted, deduplicated columns per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn from_triplets(t: &Triplets) -> Csr {
        let mut sorted = t.entries.clone();
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));

        // per-row counts first, prefix-summed into offsets afterwards
        let mut row_ptr = vec![0usize; t.n_rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());

        let mut last = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..t.n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }

        Csr {
            n_rows: t.n_rows,
            n_cols: t.n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_cols);
        debug_assert_eq!(y.len(), self.n_rows);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                acc += v * x[c];
            }
            y[i] = acc;
        }
    }

    /// y = A^T x
    pub fn tmatvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_rows);
        debug_assert_eq!(y.len(), self.n_cols);
        y.fill(0.0);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * x[i];
            }
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut row_ptr = vec![0usize; self.n_cols + 1];
        for &c in &self.col_idx {
            row_ptr[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            row_ptr[c + 1] += row_ptr[c];
        }
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut next = row_ptr.clone();
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                col_idx[next[c]] = i;
                values[next[c]] = v;
                next[c] += 1;
            }
        }
        Csr {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    #[cfg(test)]
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                d[i][c] = v;
            }
        }
        d
    }
}

/// J^T J + lambda I with both triangles stored, built row by row with a
/// dense accumulator: (J^T J) row c = sum over rows r containing column c of
/// J[r,c] * J[r,:]. The diagonal is always part of the pattern.
pub fn normal_matrix(j: &Csr, lambda: f64) -> Csr {
    let jt = j.transpose();
    let m = j.n_cols;
    let mut row_ptr = vec![0usize; m + 1];
    let mut col_idx = Vec::with_capacity(j.nnz() * 4);
    let mut values = Vec::with_capacity(j.nnz() * 4);
    let mut acc = vec![0.0f64; m];
    let mut stamp = vec![usize::MAX; m];
    let mut touched: Vec<usize> = Vec::new();
    for c in 0..m {
        touched.clear();
        stamp[c] = c;
        acc[c] = lambda;
        touched.push(c);
        let (rows, jtv) = jt.row(c);
        for (&r, &v) in rows.iter().zip(jtv) {
            let (cols2, vals2) = j.row(r);
            for (&c2, &v2) in cols2.iter().zip(vals2) {
                if stamp[c2] != c {
                    stamp[c2] = c;
                    acc[c2] = 0.0;
                    touched.push(c2);
                }
                acc[c2] += v * v2;
            }
        }
        touched.sort_unstable();
        for &c2 in &touched {
            col_idx.push(c2);
            values.push(acc[c2]);
        }
        row_ptr[c + 1] = col_idx.len();
    }
    Csr {
        n_rows: m,
        n_cols: m,
        row_ptr,
        col_idx,
        values,
    }
}

/// Solve A x = b for a symmetric positive definite `a` holding both
/// triangles in CSR form. Symmetry lets the CSR arrays double as the
/// column-major layout faer expects, skipping the triplet detour.
pub fn solve_normal(a: &Csr, b: &[f64]) -> Result<Vec<f64>> {
    use faer::prelude::*;
    debug_assert_eq!(a.n_rows, a.n_cols);
    debug_assert_eq!(b.len(), a.n_rows);
    let sym = faer::sparse::SymbolicSparseColMat::new_checked(
        a.n_rows,
        a.n_cols,
        a.row_ptr.clone(),
        None,
        a.col_idx.clone(),
    );
    let m = faer::sparse::SparseColMat::new(sym, a.values.clone());
    let ch = m
        .sp_cholesky(faer::Side::Lower)
        .map_err(|e| Error::Singular(format!("normal equations Cholesky: {e:?}")))?;
    let rhs = faer::Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = ch.solve(&rhs);
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

fn to_faer(t: &Triplets) -> Result<faer::sparse::SparseColMat<usize, f64>> {
    let trips: Vec<faer::sparse::Triplet<usize, usize, f64>> = t
        .entries
        .iter()
        .map(|&(r, c, v)| faer::sparse::Triplet::new(r, c, v))
        .collect();
    faer::sparse::SparseColMat::try_new_from_triplets(t.n_rows, t.n_cols, &trips)
        .map_err(|e| Error::Singular(format!("bad sparse structure: {e:?}")))
}

/// Solve the square unsymmetric system A x = b with sparse LU.
pub fn lu_solve(a: &Triplets, b: &[f64]) -> Result<Vec<f64>> {
    use faer::prelude::*;
    debug_assert_eq!(a.n_rows, a.n_cols);
    debug_assert_eq!(b.len(), a.n_rows);
    let m = to_faer(a)?;
    let lu = m
        .sp_lu()
        .map_err(|e| Error::Singular(format!("sparse LU: {e:?}")))?;
    let rhs = faer::Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = lu.solve(&rhs);
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

/// Solve the symmetric positive definite system A x = b with sparse Cholesky.
/// `a` must contain both triangles.
pub fn cholesky_solve(a: &Triplets, b: &[f64]) -> Result<Vec<f64>> {
    use faer::prelude::*;
    debug_assert_eq!(a.n_rows, a.n_cols);
    debug_assert_eq!(b.len(), a.n_rows);
    let m = to_faer(a)?;
    let ch = m
        .sp_cholesky(faer::Side::Lower)
        .map_err(|e| Error::Singular(format!("sparse Cholesky: {e:?}")))?;
    let rhs = faer::Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = ch.solve(&rhs);
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

/// Dense symmetric solve for the small OPF Hessians.
pub fn dense_sym_solve(a: &faer::Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    use faer::prelude::*;
    let ch = a
        .llt(faer::Side::Lower)
        .map_err(|_| Error::Singular("dense Cholesky failed".into()))?;
    let rhs = faer::Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = ch.solve(&rhs);
    Ok((0..b.len()).map(|i| x[(i, 0)]).collect())
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn norm2_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}
