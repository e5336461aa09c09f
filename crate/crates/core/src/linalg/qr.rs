use super::Matrix;
use crate::error::{Error, Result};

/// Thin Householder QR of a tall matrix: `a = q * r` with `q` (m×n) having
/// orthonormal columns and `r` (n×n) upper triangular.
#[derive(Debug, Clone)]
pub struct Qr {
    pub q: Matrix,
    pub r: Matrix,
}

pub fn qr(a: &Matrix) -> Result<Qr> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::shape(format!("thin QR needs rows >= cols, got {m}x{n}")));
    }
    // Work column-major so reflections touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);

    for j in 0..n {
        let x = &cols[j][j..];
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = x.to_vec();
        if norm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|t| t * t).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|t| *t /= vnorm);
        for col in cols.iter_mut().skip(j) {
            apply_reflector(&v, &mut col[j..]);
        }
        reflectors.push(v);
    }

    let r = Matrix::from_fn(n, n, |i, j| if i <= j { cols[j][i] } else { 0.0 });

    let mut q_cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    for (j, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for col in q_cols.iter_mut() {
            apply_reflector(v, &mut col[j..]);
        }
    }
    let q = Matrix::from_fn(m, n, |i, j| q_cols[j][i]);
    Ok(Qr { q, r })
}

/// `x <- (I - 2 v vᵀ) x` for unit `v`.
fn apply_reflector(v: &[f64], x: &mut [f64]) {
    let dot: f64 = v.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
    if dot != 0.0 {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi -= 2.0 * dot * vi;
        }
    }
}

/// Solve `r x = b` for upper-triangular `r`, column by column of `b`.
pub fn back_substitute(r: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = r.rows();
    if r.cols() != n || b.rows() != n {
        return Err(Error::shape("back substitution dimensions"));
    }
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for j in i + 1..n {
                s -= r[(i, j)] * x[(j, c)];
            }
            let d = r[(i, i)];
            if d == 0.0 {
                return Err(Error::Numerical(format!("singular triangular factor at {i}")));
            }
            x[(i, c)] = s / d;
        }
    }
    Ok(x)
}
