//! Dense helpers not provided directly by nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Orthonormal basis of the null space of `c` (rows x cols, full row rank).
///
/// Runs a column-pivoted Householder QR on `cᵀ` and returns the trailing
/// `cols - rows` columns of the full orthogonal factor.
pub(crate) fn null_space(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = c.shape();
    if rows > cols {
        return Err(Error::RankDeficient {
            rank: cols,
            expected: rows,
        });
    }
    let mut a = c.transpose(); // cols x rows
    let m = cols;
    let r = rows;
    let mut norms: Vec<f64> = (0..r).map(|j| a.column(j).norm_squared()).collect();
    let mut reflectors: Vec<DVector<f64>> = Vec::with_capacity(r);
    let mut first_diag = 0.0f64;

    for k in 0..r {
        // Pivot on the largest remaining column.
        let (p, _) = norms[k..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
        let p = p + k;
        if p != k {
            a.swap_columns(k, p);
            norms.swap(k, p);
        }

        let x = a.view((k, k), (m - k, 1)).column(0).into_owned();
        let alpha = x.norm();
        if k == 0 {
            first_diag = alpha;
        }
        let tol = (m.max(r) as f64) * f64::EPSILON * first_diag.max(f64::MIN_POSITIVE);
        if alpha <= tol {
            return Err(Error::RankDeficient {
                rank: k,
                expected: r,
            });
        }
        let mut v = x;
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vnorm = v.norm();
        v /= vnorm;

        // A[k.., k..] -= 2 v (vᵀ A[k.., k..])
        let mut block = a.view_mut((k, k), (m - k, r - k));
        let proj = v.transpose() * &block;
        block -= 2.0 * &v * proj;
        for j in (k + 1)..r {
            norms[j] = a.view((k + 1, j), (m - k - 1, 1)).norm_squared();
        }
        reflectors.push(v);
    }

    // Q[:, r..] = H_0 ... H_{r-1} [0; I]
    let mut q = DMatrix::<f64>::zeros(m, m - r);
    for j in 0..(m - r) {
        q[(r + j, j)] = 1.0;
    }
    for (k, v) in reflectors.iter().enumerate().rev() {
        let mut block = q.view_mut((k, 0), (m - k, m - r));
        let proj = v.transpose() * &block;
        block -= 2.0 * v * proj;
    }
    Ok(q)
}

#[cfg(test)]
pub(crate) fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_single_detection_block() {
        // Variables (in, det, out).
        let c = DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 0.0, -1.0, 1.0]);
        let b = null_space(&c).unwrap();
        assert_eq!(b.shape(), (3, 1));
        let s = 1.0 / 3f64.sqrt();
        let sign = b[(0, 0)].signum();
        for i in 0..3 {
            assert!((b[(i, 0)] * sign - s).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_deficient_rejected() {
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0]);
        assert!(matches!(null_space(&c), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn random_matrix_basis_is_orthonormal_and_annihilated() {
        let c = DMatrix::from_fn(4, 9, |i, j| {
            ((i * 7 + j * 3) % 5) as f64 - 2.0 + (i == j) as u8 as f64
        });
        let b = null_space(&c).unwrap();
        assert_eq!(b.ncols(), 5);
        assert!(max_abs(&(&c * &b)) < 1e-12);
        let gram = b.transpose() * &b - DMatrix::identity(5, 5);
        assert!(max_abs(&gram) < 1e-12);
    }
}
