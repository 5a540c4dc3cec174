//! Sparse SPD solvers and dense helpers shared by the fine, patch and coarse solves.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};

use crate::error::{Error, Result};

/// Marker for "not selected" in dense index maps.
pub(crate) const UNMAPPED: usize = usize::MAX;

/// Which algorithm backs an SPD solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverKind {
    /// Sparse Cholesky factorization.
    #[default]
    Direct,
    /// Jacobi-preconditioned conjugate gradients.
    ConjugateGradient,
}

impl std::str::FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" | "cholesky" => Ok(Self::Direct),
            "cg" => Ok(Self::ConjugateGradient),
            other => Err(Error::invalid(format!("unknown solver `{other}`"))),
        }
    }
}

pub fn csr_mul(a: &CsrMatrix<f64>, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    csr_mul_into(a, x, &mut y);
    y
}

pub fn csr_mul_into(a: &CsrMatrix<f64>, x: &[f64], y: &mut [f64]) {
    for (i, row) in a.row_iter().enumerate() {
        y[i] = row
            .col_indices()
            .iter()
            .zip(row.values())
            .map(|(&j, &v)| v * x[j])
            .sum();
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `x^T A x`.
pub fn quadratic_form(a: &CsrMatrix<f64>, x: &[f64]) -> f64 {
    a.row_iter()
        .zip(x)
        .map(|(row, &xi)| {
            xi * row
                .col_indices()
                .iter()
                .zip(row.values())
                .map(|(&j, &v)| v * x[j])
                .sum::<f64>()
        })
        .sum()
}

/// Builds the inverse of a sorted index list as a dense map of length `n`.
pub(crate) fn index_map(indices: &[usize], n: usize) -> Vec<usize> {
    let mut map = vec![UNMAPPED; n];
    for (local, &g) in indices.iter().enumerate() {
        map[g] = local;
    }
    map
}

/// Principal submatrix `A[idx, idx]` of a symmetric matrix, in CSC layout.
///
/// `idx` must be sorted so that column order is preserved.
pub fn principal_submatrix(a: &CsrMatrix<f64>, idx: &[usize]) -> CscMatrix<f64> {
    let map = index_map(idx, a.ncols());
    let mut offsets = Vec::with_capacity(idx.len() + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    offsets.push(0);
    for &g in idx {
        let row = a.row(g);
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            let lj = map[j];
            if lj != UNMAPPED {
                cols.push(lj);
                vals.push(v);
            }
        }
        offsets.push(cols.len());
    }
    // The CSR rows of a symmetric matrix are its CSC columns.
    CscMatrix::try_from_csc_data(idx.len(), idx.len(), offsets, cols, vals)
        .expect("submatrix of a valid CSR matrix is valid")
}

pub fn csc_to_csr(a: &CscMatrix<f64>) -> CsrMatrix<f64> {
    CsrMatrix::from(a)
}

pub fn csr_from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> CsrMatrix<f64> {
    let mut coo = CooMatrix::new(n, n);
    for &(i, j, v) in triplets {
        coo.push(i, j, v);
    }
    CsrMatrix::from(&coo)
}

/// A factorized (or CG-backed) SPD operator with a residual contract.
pub struct SpdSolver {
    matrix: CsrMatrix<f64>,
    factor: Option<CscCholesky<f64>>,
    tol: f64,
}

impl SpdSolver {
    pub fn new(matrix: &CscMatrix<f64>, kind: SolverKind, tol: f64) -> Result<Self> {
        let csr = csc_to_csr(matrix);
        let factor = match kind {
            SolverKind::Direct if matrix.nrows() > 0 => Some(
                CscCholesky::factor(matrix)
                    .map_err(|e| Error::NotPositiveDefinite(format!("{e:?}")))?,
            ),
            _ => None,
        };
        Ok(Self {
            matrix: csr,
            factor,
            tol,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &CsrMatrix<f64> {
        &self.matrix
    }

    /// Solves `A x = b` so that `|A x - b| <= tol |b|`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if n == 0 {
            return Ok(Vec::new());
        }
        let bn = norm(b);
        if bn == 0.0 {
            return Ok(vec![0.0; n]);
        }
        match &self.factor {
            Some(f) => {
                let mut x: Vec<f64> = f.solve(&DVector::from_column_slice(b)).as_slice().to_vec();
                // A couple of refinement sweeps recover digits lost to round-off.
                for _ in 0..3 {
                    let r: Vec<f64> = csr_mul(&self.matrix, &x)
                        .iter()
                        .zip(b)
                        .map(|(ax, bi)| bi - ax)
                        .collect();
                    let rn = norm(&r);
                    if rn <= self.tol * bn {
                        return Ok(x);
                    }
                    let dx = f.solve(&DVector::from_vec(r));
                    x.iter_mut().zip(dx.iter()).for_each(|(xi, d)| *xi += d);
                }
                let rn = norm(
                    &csr_mul(&self.matrix, &x)
                        .iter()
                        .zip(b)
                        .map(|(ax, bi)| bi - ax)
                        .collect::<Vec<_>>(),
                );
                if rn <= self.tol * bn {
                    Ok(x)
                } else {
                    Err(Error::NoConvergence {
                        iterations: 3,
                        residual: rn / bn,
                    })
                }
            }
            None => conjugate_gradient(&self.matrix, b, self.tol, 20 * n + 100),
        }
    }

    /// Solves for every column of `b`.
    pub fn solve_many(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim(), b.ncols());
        if self.dim() == 0 {
            return Ok(out);
        }
        if let Some(f) = &self.factor {
            out = f.solve(b);
            // Residual contract checked columnwise, refined when needed.
            for c in 0..b.ncols() {
                let bc: Vec<f64> = b.column(c).iter().copied().collect();
                let xc: Vec<f64> = out.column(c).iter().copied().collect();
                let r = csr_mul(&self.matrix, &xc);
                let rn = norm(&r.iter().zip(&bc).map(|(a, b)| b - a).collect::<Vec<_>>());
                if rn > self.tol * norm(&bc) {
                    let x = self.solve(&bc)?;
                    out.column_mut(c).copy_from_slice(&x);
                }
            }
            return Ok(out);
        }
        for c in 0..b.ncols() {
            let bc: Vec<f64> = b.column(c).iter().copied().collect();
            let x = self.solve(&bc)?;
            out.column_mut(c).copy_from_slice(&x);
        }
        Ok(out)
    }
}

/// Jacobi-preconditioned CG. Fails with the achieved residual after `max_iter`.
pub fn conjugate_gradient(
    a: &CsrMatrix<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = b.len();
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok(x);
    }
    let mut diag = vec![1.0; n];
    for (i, row) in a.row_iter().enumerate() {
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            if i == j && v > 0.0 {
                diag[i] = v;
            }
        }
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&diag).map(|(r, d)| r / d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        csr_mul_into(a, &p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "non-positive curvature {pap:e} at CG iteration {it}"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= tol * bn {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: norm(&r) / bn,
    })
}

/// Pseudo-inverse application for a symmetric positive semidefinite matrix.
///
/// Eigen-directions below `rel_tol * lambda_max` are dropped.
pub struct SymmetricPseudoInverse {
    eigen: SymmetricEigen<f64, nalgebra::Dyn>,
    keep: Vec<bool>,
    pub dropped: usize,
    pub condition: f64,
}

impl SymmetricPseudoInverse {
    pub fn new(s: DMatrix<f64>, rel_tol: f64) -> Self {
        let eigen = SymmetricEigen::new(s);
        let max = eigen.eigenvalues.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
        let keep: Vec<bool> = eigen
            .eigenvalues
            .iter()
            .map(|&l| max > 0.0 && l > rel_tol * max)
            .collect();
        let min_kept = eigen
            .eigenvalues
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .fold(f64::INFINITY, |m, (&l, _)| m.min(l));
        let dropped = keep.iter().filter(|k| !**k).count();
        let condition = if min_kept.is_finite() { max / min_kept } else { 1.0 };
        Self {
            eigen,
            keep,
            dropped,
            condition,
        }
    }

    pub fn apply(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let q = &self.eigen.eigenvectors;
        let mut coeffs = q.transpose() * rhs;
        for (i, c) in coeffs.iter_mut().enumerate() {
            *c = if self.keep[i] {
                *c / self.eigen.eigenvalues[i]
            } else {
                0.0
            };
        }
        q * coeffs
    }
}

/// Ratio of extreme singular values of a dense square matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
