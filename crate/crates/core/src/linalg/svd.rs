//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Tall inputs are first reduced with a Householder QR so the rotations run
//! on the small square factor; wide inputs are handled through the
//! transpose. One-sided Jacobi computes small singular values to high
//! relative accuracy, which keeps the Eckart–Young truncation errors exact
//! well below the tolerances the decomposer is tested against.

use super::{qr, Matrix};
use crate::error::{Error, Result};

/// Sweep cap. Cyclic Jacobi converges quadratically; well under 20 sweeps
/// are needed for any matrix this crate sees.
const MAX_SWEEPS: usize = 80;

/// Thin SVD `a = u * diag(singular_values) * vt`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Length r = min(m, n), descending, nonnegative.
    pub singular_values: Vec<f64>,
    /// r×n, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    /// Rank-`k` reconstruction `u_k * diag(s_k) * vt_k`.
    pub fn truncated(&self, k: usize) -> Matrix {
        let k = k.min(self.singular_values.len());
        let us = self
            .u
            .leading_columns(k)
            .scale_columns(&self.singular_values[..k]);
        us.matmul(&self.vt.leading_rows(k))
            .expect("factor shapes agree by construction")
    }

    pub fn reconstruct(&self) -> Matrix {
        self.truncated(self.singular_values.len())
    }

    /// Number of singular values above `rel_tol * sigma_max`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        numerical_rank(&self.singular_values, rel_tol)
    }
}

pub fn numerical_rank(singular_values: &[f64], rel_tol: f64) -> usize {
    let top = singular_values.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > rel_tol * top).count()
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(Error::Numerical(format!(
            "svd of {}x{} matrix with non-finite entries",
            a.rows(),
            a.cols()
        )));
    }
    let (m, n) = a.shape();
    if m < n {
        let t = svd(&a.transpose())?;
        return Ok(Svd {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        });
    }
    if m == n {
        return jacobi_square(a).map_err(|e| annotate(e, m, n));
    }
    let qr::Qr { q, r } = qr::qr(a)?;
    let inner = jacobi_square(&r).map_err(|e| annotate(e, m, n))?;
    Ok(Svd {
        u: q.matmul(&inner.u)?,
        singular_values: inner.singular_values,
        vt: inner.vt,
    })
}

/// Singular values only.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.singular_values)
}

fn annotate(e: Error, m: usize, n: usize) -> Error {
    match e {
        Error::Numerical(msg) => Error::Numerical(format!("{msg} (input {m}x{n})")),
        other => other,
    }
}

fn jacobi_square(a: &Matrix) -> Result<Svd> {
    let n = a.cols();
    debug_assert_eq!(a.rows(), n);
    // g[j] is column j of the working matrix, v[j] column j of V.
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let tol = f64::EPSILON * n as f64;

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (gp, gq) = (&g[p], &g[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in gp.iter().zip(gq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge after {MAX_SWEEPS} sweeps"
        )));
    }

    let sigma: Vec<f64> = g
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));

    let top = sigma.iter().cloned().fold(0.0, f64::max);
    let floor = top * f64::EPSILON * 1e-6;
    let mut u_cols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&j| {
            let s = sigma[j];
            if s > floor && s > f64::MIN_POSITIVE {
                Some(g[j].iter().map(|x| x / s).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, n);

    let singular_values: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let u_cols: Vec<Vec<f64>> = u_cols.into_iter().map(|c| c.expect("completed")).collect();
    let u = Matrix::from_fn(n, n, |i, k| u_cols[k][i]);
    let vt = Matrix::from_fn(n, n, |k, i| v[order[k]][i]);
    Ok(Svd {
        u,
        singular_values,
        vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fill `None` slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(cols: &mut [Option<Vec<f64>>], dim: usize) {
    let mut candidate = 0;
    for slot in 0..cols.len() {
        if cols[slot].is_some() {
            continue;
        }
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            // Two passes of Gram-Schmidt.
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let d: f64 = other.iter().zip(&e).map(|(a, b)| a * b).sum();
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= d * o);
                }
            }
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[slot] = Some(e);
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn check_invariants(a: &Matrix, s: &Svd) {
        let r = a.rows().min(a.cols());
        assert_eq!(s.singular_values.len(), r);
        assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.singular_values.iter().all(|&x| x >= 0.0));
        let utu = s.u.t_matmul(&s.u).unwrap();
        assert!(utu.sub(&Matrix::identity(r)).unwrap().max_abs() <= 1e-10);
        let vvt = s.vt.matmul(&s.vt.transpose()).unwrap();
        assert!(vvt.sub(&Matrix::identity(r)).unwrap().max_abs() <= 1e-10);
        let back = s.reconstruct();
        let rel = back.sub(a).unwrap().frobenius_norm() / a.frobenius_norm().max(1e-300);
        assert!(rel <= 1e-10, "relative reconstruction error {rel}");
    }

    #[test]
    fn diagonal() {
        let a = Matrix::diag(&[1.0, 3.0]);
        let s = svd(&a).unwrap();
        assert_eq!(s.singular_values, vec![3.0, 1.0]);
        check_invariants(&a, &s);
    }

    #[test]
    fn orthogonal_matrix_has_unit_values() {
        let q = qr::qr(&random(6, 6, 3)).unwrap().q;
        let s = svd(&q).unwrap();
        assert!(s.singular_values.iter().all(|v| (v - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn shapes_tall_wide_square() {
        for (i, &(m, n)) in [(18, 4), (4, 18), (7, 7), (1, 5), (5, 1), (1, 1)].iter().enumerate() {
            let a = random(m, n, 100 + i as u64);
            check_invariants(&a, &svd(&a).unwrap());
        }
    }

    #[test]
    fn rank_deficient_completion() {
        // Rank one 5x4 plus an all-zero matrix.
        let a = Matrix::from_fn(5, 4, |i, j| (i as f64 + 1.0) * (j as f64 - 1.5));
        let s = svd(&a).unwrap();
        check_invariants(&a, &s);
        assert_eq!(s.numerical_rank(1e-12), 1);

        let z = Matrix::zeros(3, 3);
        let s = svd(&z).unwrap();
        assert_eq!(s.singular_values, vec![0.0; 3]);
        let utu = s.u.t_matmul(&s.u).unwrap();
        assert!(utu.sub(&Matrix::identity(3)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn truncation_error_is_tail_energy() {
        let a = random(8, 6, 9);
        let s = svd(&a).unwrap();
        for k in 0..=6 {
            let err = a.sub(&s.truncated(k)).unwrap().frobenius_norm();
            let tail: f64 = s.singular_values[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((err - tail).abs() <= 1e-12 * a.frobenius_norm());
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::zeros(2, 2);
        a.as_mut_slice()[1] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::Numerical(_))));
    }
}
