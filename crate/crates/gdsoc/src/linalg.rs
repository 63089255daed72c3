//! Dense linear-algebra helpers: column-major vectorization, floored symmetric
//! square roots, and the equality-constrained least-squares KKT solver.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Stacks the columns of `m` into a single vector (column-major).
pub fn vec_mat(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_mat`]: rebuilds an `rows x cols` matrix from a stacked vector.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "unvec: vector length {} != {} x {}",
            v.len(),
            rows,
            cols
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Symmetric square root and inverse square root with an eigenvalue floor.
///
/// The input is symmetrized first; eigenvalues below `rel_floor * max|lambda|`
/// are raised to the floor so that both factors stay well defined for
/// numerically semidefinite Hessians.
pub fn sym_sqrt_floored(m: &DMatrix<f64>, rel_floor: f64) -> Result<SymSqrt> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension("sym_sqrt_floored: matrix not square".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &l| acc.max(l.abs()));
    let floor = if max_abs > 0.0 { rel_floor * max_abs } else { rel_floor };
    let n = m.nrows();
    let mut sqrt_vals = DVector::zeros(n);
    let mut inv_vals = DVector::zeros(n);
    let mut floored = 0usize;
    for i in 0..n {
        let mut l = eig.eigenvalues[i];
        if l < floor {
            l = floor;
            floored += 1;
        }
        sqrt_vals[i] = l.sqrt();
        inv_vals[i] = 1.0 / l.sqrt();
    }
    let u = &eig.eigenvectors;
    let sqrt = u * DMatrix::from_diagonal(&sqrt_vals) * u.transpose();
    let inv_sqrt = u * DMatrix::from_diagonal(&inv_vals) * u.transpose();
    Ok(SymSqrt {
        sqrt,
        inv_sqrt,
        floored_eigenvalues: floored,
    })
}

#[derive(Debug, Clone)]
pub struct SymSqrt {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: DMatrix<f64>,
    pub floored_eigenvalues: usize,
}

/// A sparse column with at most a handful of nonzeros, `(row, value)` pairs.
pub type SparseCol = Vec<(usize, f64)>;

/// Applies `Q^T v` for sparse columns.
pub fn sparse_cols_tx(cols: &[SparseCol], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(cols.len());
    for (j, col) in cols.iter().enumerate() {
        out[j] = col.iter().map(|&(r, val)| val * v[r]).sum();
    }
    out
}

/// Applies `Q lambda` for sparse columns.
pub fn sparse_cols_mul(cols: &[SparseCol], lambda: &DVector<f64>, dim: usize) -> DVector<f64> {
    let mut out = DVector::zeros(dim);
    for (j, col) in cols.iter().enumerate() {
        for &(r, val) in col {
            out[r] += val * lambda[j];
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct KktSolution {
    pub primal: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// `||Q^T v - b||_inf` after refinement.
    pub constraint_residual: f64,
    /// `||A v + Q lambda|| / max(||A v||, eps)` — first-order stationarity.
    pub stationarity_residual: f64,
}

/// Solves the equality-constrained least-squares KKT system
///
/// ```text
/// [ A  Q ] [v     ]   [0]
/// [ Q^T 0] [lambda] = [b]
/// ```
///
/// with `A` symmetric positive definite (callers add their ridge beforehand).
/// The factorization is a Cholesky of `A` followed by a Cholesky of the Schur
/// complement `Q^T A^{-1} Q`; `A` is never inverted explicitly. One step of
/// iterative refinement is applied.
pub fn solve_kkt(a: &DMatrix<f64>, q_cols: &[SparseCol], b: &DVector<f64>) -> Result<KktSolution> {
    let n = a.nrows();
    let q = q_cols.len();
    if a.ncols() != n {
        return Err(Error::Dimension("solve_kkt: A not square".into()));
    }
    if b.len() != q {
        return Err(Error::Dimension(format!(
            "solve_kkt: b length {} != {} constraints",
            b.len(),
            q
        )));
    }
    let chol_a = a.clone().cholesky().ok_or_else(|| Error::Singular {
        context: "KKT: Cholesky of the (ridged) normal matrix".into(),
        cond: f64::INFINITY,
    })?;

    // Dense Q is needed for the batched triangular solves; the sparse columns
    // are kept for the cheap Q^T products.
    let mut q_dense = DMatrix::zeros(n, q);
    for (j, col) in q_cols.iter().enumerate() {
        for &(r, val) in col {
            if r >= n {
                return Err(Error::Dimension(format!(
                    "solve_kkt: constraint row {} out of range {}",
                    r, n
                )));
            }
            q_dense[(r, j)] = val;
        }
    }
    let x = chol_a.solve(&q_dense); // A^{-1} Q

    // Schur complement S = Q^T A^{-1} Q via the sparse columns.
    let mut s = DMatrix::zeros(q, q);
    for (j, col) in q_cols.iter().enumerate() {
        for &(r, val) in col {
            for i in 0..q {
                s[(j, i)] += val * x[(r, i)];
            }
        }
    }
    // Symmetrize against rounding before factorizing.
    let s = (&s + s.transpose()) * 0.5;
    let chol_s = s.cholesky().ok_or_else(|| Error::Singular {
        context: format!(
            "KKT: Schur complement rank-deficient ({} constraints on {} unknowns)",
            q, n
        ),
        cond: f64::INFINITY,
    })?;

    let t = chol_s.solve(b);
    let mut v = &x * &t;
    let mut lambda = -t;

    // One refinement pass on the full KKT residual.
    for _ in 0..1 {
        let r1 = -(a * &v) - sparse_cols_mul(q_cols, &lambda, n);
        let r2 = b - sparse_cols_tx(q_cols, &v);
        let a_inv_r1 = chol_a.solve(&r1);
        let rhs = sparse_cols_tx(q_cols, &a_inv_r1) - &r2;
        let dlambda = chol_s.solve(&rhs);
        let dv = chol_a.solve(&(r1 - sparse_cols_mul(q_cols, &dlambda, n)));
        v += dv;
        lambda += dlambda;
    }

    let constraint_residual = (sparse_cols_tx(q_cols, &v) - b).amax();
    let av = a * &v;
    let av_norm = av.norm().max(1e-300);
    let stationarity_residual = (av + sparse_cols_mul(q_cols, &lambda, n)).norm() / av_norm;

    Ok(KktSolution {
        primal: v,
        multipliers: lambda,
        constraint_residual,
        stationarity_residual,
    })
}

/// Adds `rel * trace(A)/dim` to the diagonal in place and returns the ridge.
pub fn add_trace_ridge(a: &mut DMatrix<f64>, rel: f64) -> f64 {
    let n = a.nrows();
    let eps = rel * a.trace() / n as f64;
    for i in 0..n {
        a[(i, i)] += eps;
    }
    eps
}
