//! Hand-rolled spectral routines: a one-sided Jacobi SVD for singular
//! values (numerically safer on thin matrices than forming the Gram matrix,
//! whose small singular values would be squared away), and a cyclic Jacobi
//! eigendecomposition for small symmetric matrices.

use crate::error::{Error, Result};

fn jacobi_cs(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let root = (1.0 + tau * tau).sqrt();
    let t = if tau >= 0.0 {
        1.0 / (tau + root)
    } else {
        -1.0 / (-tau + root)
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

/// Singular values of a row-major `rows x cols` matrix, descending.
///
/// Hestenes' variant: orthogonalize pairs of columns by plane rotations
/// until every pair is numerically orthogonal; the column norms are then
/// the singular values.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || a.len() != rows * cols {
        return Err(Error::shape(
            "singular_values",
            format!("{} values for {rows} x {cols}", a.len()),
        ));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("singular values of a non-finite matrix".into()));
    }
    // Work on the transpose when the matrix is wide, so columns are the
    // short side; the singular values are the same.
    let (m, n, mut col): (usize, usize, Vec<Vec<f64>>) = if rows >= cols {
        let c = (0..cols)
            .map(|j| (0..rows).map(|i| a[i * cols + j]).collect())
            .collect();
        (rows, cols, c)
    } else {
        let c = (0..rows)
            .map(|i| (0..cols).map(|j| a[i * cols + j]).collect())
            .collect();
        (cols, rows, c)
    };

    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut app, mut aqq, mut apq) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    app += col[p][i] * col[p][i];
                    aqq += col[q][i] * col[q][i];
                    apq += col[p][i] * col[q][i];
                }
                if apq == 0.0 || apq.abs() <= 1e-15 * (app * aqq).sqrt() {
                    continue;
                }
                let (c, s) = jacobi_cs(app, aqq, apq);
                for i in 0..m {
                    let vp = col[p][i];
                    let vq = col[q][i];
                    col[p][i] = c * vp - s * vq;
                    col[q][i] = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sv: Vec<f64> = col
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sv)
}

/// Number of singular values above `max(rows, cols) * sigma_max * eps` —
/// the numerical rank under the conventional tolerance.
pub fn effective_rank(a: &[f64], rows: usize, cols: usize) -> Result<usize> {
    let sv = singular_values(a, rows, cols)?;
    let tol = rows.max(cols) as f64 * sv[0] * f64::EPSILON;
    Ok(sv.iter().filter(|&&s| s > tol).count())
}

/// Eigendecomposition of a symmetric row-major `n x n` matrix by cyclic
/// Jacobi rotations. Returns `(eigenvalues, eigenvectors)` where column `j`
/// of the row-major eigenvector matrix belongs to `eigenvalues[j]`.
/// Not sorted.
pub(crate) fn sym_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() <= 1e-15 * norm {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (c, s) = jacobi_cs(m[p * n + p], m[q * n + q], apq);
                for k in 0..n {
                    let kp = m[k * n + p];
                    let kq = m[k * n + q];
                    m[k * n + p] = c * kp - s * kq;
                    m[k * n + q] = s * kp + c * kq;
                }
                for k in 0..n {
                    let pk = m[p * n + k];
                    let qk = m[q * n + k];
                    m[p * n + k] = c * pk - s * qk;
                    m[q * n + k] = s * pk + c * qk;
                }
                for k in 0..n {
                    let kp = v[k * n + p];
                    let kq = v[k * n + q];
                    v[k * n + p] = c * kp - s * kq;
                    v[k * n + q] = s * kp + c * kq;
                }
            }
        }
    }
    let eigvals = (0..n).map(|i| m[i * n + i]).collect();
    (eigvals, v)
}
