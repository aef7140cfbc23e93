//! Sparse or dense accumulation of linear operators, and their solution.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use crate::error::{Error, Result};

/// Square operator assembled from scattered `(row, col, value)` additions.
pub(crate) enum Assembler {
    Dense(Mat<f64>),
    Sparse { n: usize, trips: Vec<Triplet<usize, usize, f64>> },
}

/// Largest system assembled densely when the estimate allows it.
const DENSE_MAX: usize = 12_000;

impl Assembler {
    /// Picks dense storage when the estimated fill exceeds a tenth of the
    /// matrix, or when `force_dense` is set.
    pub fn new(n: usize, estimated_nnz: usize, force_dense: bool) -> Assembler {
        if force_dense || (n <= DENSE_MAX && estimated_nnz.saturating_mul(10) > n * n) {
            Assembler::Dense(Mat::zeros(n, n))
        } else {
            Assembler::Sparse {
                n,
                trips: Vec::with_capacity(estimated_nnz.min(50_000_000)),
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Assembler::Dense(m) => m.nrows(),
            Assembler::Sparse { n, .. } => *n,
        }
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        match self {
            Assembler::Dense(m) => m[(r, c)] += v,
            Assembler::Sparse { trips, .. } => trips.push(Triplet::new(r, c, v)),
        }
    }

    /// Adds `alpha * I`.
    pub fn add_identity(&mut self, alpha: f64) {
        for i in 0..self.dim() {
            self.add(i, i, alpha);
        }
    }

    /// `A <- alpha A`.
    pub fn scale(&mut self, alpha: f64) {
        match self {
            Assembler::Dense(m) => *m = &*m * faer::Scale(alpha),
            Assembler::Sparse { trips, .. } => trips.iter_mut().for_each(|t| t.val *= alpha),
        }
    }

    /// `y = A x`.
    #[cfg(test)]
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut y = vec![0.0; n];
        match self {
            Assembler::Dense(m) => {
                for r in 0..n {
                    let mut acc = 0.0;
                    for c in 0..n {
                        acc += m[(r, c)] * x[c];
                    }
                    y[r] = acc;
                }
            }
            Assembler::Sparse { trips, .. } => {
                for t in trips {
                    y[t.row] += t.val * x[t.col];
                }
            }
        }
        y
    }

    /// Dense copy of the operator.
    pub fn to_dense(&self) -> Mat<f64> {
        match self {
            Assembler::Dense(m) => m.clone(),
            Assembler::Sparse { n, trips } => {
                let mut m = Mat::zeros(*n, *n);
                for t in trips {
                    m[(t.row, t.col)] += t.val;
                }
                m
            }
        }
    }

    /// Solves `A x = b`.
    pub fn solve(self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
        let x = match self {
            Assembler::Dense(m) => m.partial_piv_lu().solve(&rhs),
            Assembler::Sparse { n, trips } => {
                let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
                    .map_err(|e| Error::Singular(format!("sparse assembly failed: {e:?}")))?;
                let lu = a
                    .sp_lu()
                    .map_err(|e| Error::Singular(format!("sparse LU failed: {e:?}")))?;
                lu.solve(&rhs)
            }
        };
        let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular("linear solve produced non-finite values".into()));
        }
        Ok(out)
    }
}

/// Solves `A^T x = b` for a dense matrix.
pub(crate) fn solve_transposed(a: &Mat<f64>, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.nrows();
    let at = a.transpose().to_owned();
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = at.partial_piv_lu().solve(&rhs);
    let out: Vec<f64> = (0..n).map(|i| x[(i, 0)]).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("transposed solve produced non-finite values".into()));
    }
    Ok(out)
}
