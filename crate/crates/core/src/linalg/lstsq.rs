use super::{qr, svd, Matrix};
use crate::error::{Error, Result};

/// Solution of a (ridge-regularized) linear least-squares problem.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    /// `design.cols × targets.cols` coefficient matrix.
    pub solution: Matrix,
    /// Numerical column rank of the design (equal to its column count when
    /// a positive ridge makes the system well-posed).
    pub rank: usize,
    /// Set when the unregularized design lacks full column rank; the
    /// solution is then the minimum-norm one.
    pub rank_deficient: bool,
}

/// Minimize `‖targets − design·A‖²_F + ridge·‖A‖²_F`.
///
/// Full-rank and ridge problems go through Householder QR (the ridge as an
/// augmented block `[design; √ridge·I]`). When `ridge == 0` and the design
/// is rank-deficient or underdetermined, the minimum-norm solution is taken
/// from the SVD pseudo-inverse.
pub fn solve_least_squares(design: &Matrix, targets: &Matrix, ridge: f64) -> Result<LeastSquares> {
    let (m, n) = design.shape();
    if targets.rows() != m {
        return Err(Error::shape(format!(
            "least squares: design has {m} rows, targets {}",
            targets.rows()
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::invalid(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    if m < n {
        log::warn!("least squares is underdetermined: {m} rows for {n} unknowns");
    }

    if ridge > 0.0 {
        let mut aug = Matrix::zeros(m + n, n);
        aug.set_block(0, 0, design);
        let root = ridge.sqrt();
        for i in 0..n {
            aug[(m + i, i)] = root;
        }
        let mut rhs = Matrix::zeros(m + n, targets.cols());
        rhs.set_block(0, 0, targets);
        let qr::Qr { q, r } = qr::qr(&aug)?;
        let solution = qr::back_substitute(&r, &q.t_matmul(&rhs)?)?;
        return Ok(LeastSquares {
            solution,
            rank: n,
            rank_deficient: false,
        });
    }

    if m >= n {
        let qr::Qr { q, r } = qr::qr(design)?;
        let diag_max = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
        let tol = m.max(n) as f64 * f64::EPSILON * diag_max;
        if diag_max > 0.0 && (0..n).all(|i| r[(i, i)].abs() > tol) {
            let solution = qr::back_substitute(&r, &q.t_matmul(targets)?)?;
            return Ok(LeastSquares {
                solution,
                rank: n,
                rank_deficient: false,
            });
        }
    }
    min_norm(design, targets)
}

fn min_norm(design: &Matrix, targets: &Matrix) -> Result<LeastSquares> {
    let (m, n) = design.shape();
    let s = svd::svd(design)?;
    let top = s.singular_values.first().copied().unwrap_or(0.0);
    let cutoff = m.max(n) as f64 * f64::EPSILON * top;
    let rank = s.singular_values.iter().filter(|&&x| x > cutoff).count();
    // A = V_r Σ_r⁻¹ U_rᵀ targets
    let inv: Vec<f64> = s.singular_values[..rank].iter().map(|x| 1.0 / x).collect();
    let projected = s.u.leading_columns(rank).t_matmul(targets)?;
    let scaled = Matrix::from_fn(rank, targets.cols(), |i, j| projected[(i, j)] * inv[i]);
    let solution = if rank == 0 {
        Matrix::zeros(n, targets.cols())
    } else {
        s.vt.leading_rows(rank).t_matmul(&scaled)?
    };
    if rank < n {
        log::warn!("least squares design is rank deficient ({rank} < {n}); using minimum-norm solution");
    }
    Ok(LeastSquares {
        solution,
        rank,
        rank_deficient: rank < n,
    })
}
