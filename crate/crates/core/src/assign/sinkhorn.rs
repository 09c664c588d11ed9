//! Log-domain Sinkhorn normalization over a score matrix augmented with a
//! dustbin row and column.
//!
//! Row marginals are `[1; M]` plus `N` for the dustbin row, column marginals
//! `[1; N]` plus `M` for the dustbin column, so every real keypoint carries
//! unit mass and the dustbins can absorb all of it.

use nalgebra::{DMatrix, DVector};

use super::AssignError;

/// Augmented partial assignment, `(M+1) x (N+1)`; the last row and column
/// are the dustbins. Every entry outside the dustbin-dustbin corner lies in
/// `[0, 1]`; the corner holds the mass left unmatched on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(pub DMatrix<f64>);

impl AssignmentMatrix {
    /// Keypoints in A.
    pub fn m(&self) -> usize {
        self.0.nrows() - 1
    }

    /// Keypoints in B.
    pub fn n(&self) -> usize {
        self.0.ncols() - 1
    }

    /// Probability that keypoint `i` of A is unmatched.
    pub fn dustbin_a(&self, i: usize) -> f64 {
        self.0[(i, self.n())]
    }

    pub fn dustbin_b(&self, j: usize) -> f64 {
        self.0[(self.m(), j)]
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Runs `iters` alternating row/column updates of the dual potentials and
/// returns the exponentiated coupling.
pub fn sinkhorn(
    scores: &DMatrix<f64>,
    bin_score: f64,
    iters: usize,
) -> Result<AssignmentMatrix, AssignError> {
    if iters == 0 {
        return Err(AssignError::InvalidConfig("sinkhorn needs at least one iteration".into()));
    }
    if !bin_score.is_finite() || scores.iter().any(|v| !v.is_finite()) {
        return Err(AssignError::NonFiniteScore);
    }
    let (m, n) = scores.shape();
    if m == 0 || n == 0 {
        // Everything on the non-empty side goes to its dustbin.
        let mut p = DMatrix::zeros(m + 1, n + 1);
        p.column_mut(n).rows_mut(0, m).fill(1.0);
        p.row_mut(m).columns_mut(0, n).fill(1.0);
        return Ok(AssignmentMatrix(p));
    }

    let mut z = DMatrix::from_element(m + 1, n + 1, bin_score);
    z.view_mut((0, 0), (m, n)).copy_from(scores);

    let log_a = DVector::from_fn(m + 1, |i, _| if i < m { 0.0 } else { (n as f64).ln() });
    let log_b = DVector::from_fn(n + 1, |j, _| if j < n { 0.0 } else { (m as f64).ln() });
    let mut u = DVector::<f64>::zeros(m + 1);
    let mut v = DVector::<f64>::zeros(n + 1);

    for _ in 0..iters {
        for i in 0..=m {
            let row = z.row(i);
            u[i] = log_a[i] - log_sum_exp(row.iter().zip(v.iter()).map(|(s, vj)| s + vj));
        }
        for j in 0..=n {
            let col = z.column(j);
            v[j] = log_b[j] - log_sum_exp(col.iter().zip(u.iter()).map(|(s, ui)| s + ui));
        }
    }

    // Column sums are exact after the last update. Rows that overshoot their
    // unit mass (possible before convergence) are scaled back so P stays a
    // partial assignment; converged rows are untouched.
    for i in 0..m {
        let row = z.row(i);
        let excess = log_sum_exp(row.iter().zip(v.iter()).map(|(s, vj)| s + vj)) + u[i];
        if excess > 0.0 {
            u[i] -= excess;
        }
    }

    let p = DMatrix::from_fn(m + 1, n + 1, |i, j| (z[(i, j)] + u[i] + v[j]).exp());
    Ok(AssignmentMatrix(p))
}
