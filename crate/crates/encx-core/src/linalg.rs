//! Small dense symmetric eigensolver and subspace helpers.
//!
//! Everything in the crate that needs a spectral decomposition (PCA fitting,
//! per-target ridge solves) goes through [`sym_eigen_desc`], a cyclic Jacobi
//! iteration. Jacobi is slower than LAPACK for big matrices but is fully
//! deterministic, dependency-free, and accurate to near machine precision on
//! the matrix sizes this crate works with (up to a few thousand).

use crate::error::{EncxError, Result};
use ndarray::{Array1, Array2};

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns, so
/// `a ≈ v · diag(w) · vᵀ`. The input is symmetrized as `(a + aᵀ)/2` before
/// iterating, which absorbs the rounding asymmetry of Gram-matrix products.
pub fn sym_eigen_desc(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(EncxError::ShapeMismatch(format!(
            "sym_eigen_desc expects a square matrix, got {} x {}",
            a.nrows(),
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }

    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(EncxError::Numerical(
            "sym_eigen_desc: non-finite entries in input".into(),
        ));
    }

    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let tol = 1e-14 * scale;

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // Rotate rows/cols p and q of m.
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                // Accumulate eigenvectors.
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    // Sort eigenpairs by descending eigenvalue; stable so equal values keep
    // their sweep order, which makes tie handling deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].total_cmp(&m[[i, i]]));

    let mut w = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        w[dst] = m[[src, src]];
        for k in 0..n {
            vecs[[k, dst]] = v[[k, src]];
        }
    }
    Ok((w, vecs))
}

/// Cosines of the principal angles between the column spaces of `a` and `b`.
///
/// Both inputs must have orthonormal columns. Returned values are descending
/// in cosine (ascending in angle); the last entry gives the largest angle.
pub fn principal_angle_cosines(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array1<f64>> {
    if a.nrows() != b.nrows() {
        return Err(EncxError::ShapeMismatch(format!(
            "principal angles need equal row counts, got {} and {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let m = a.t().dot(b);
    // Singular values of m via the spectrum of mᵀm.
    let (w, _) = sym_eigen_desc(&m.t().dot(&m))?;
    Ok(w.mapv(|x| x.max(0.0).sqrt().min(1.0)))
}

/// Largest principal angle (radians) between two orthonormal column spaces.
pub fn max_principal_angle(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let cos = principal_angle_cosines(a, b)?;
    let min_cos = cos.iter().copied().fold(1.0_f64, f64::min);
    Ok(min_cos.acos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn eigen_of_known_2x2() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with vectors (1,1)/sqrt2, (1,-1)/sqrt2.
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (w, v) = sym_eigen_desc(&a).unwrap();
        assert_abs_diff_eq!(w[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 1.0, epsilon = 1e-12);
        let r = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(v[[0, 0]].abs(), r, epsilon = 1e-12);
        assert_abs_diff_eq!(v[[1, 0]].abs(), r, epsilon = 1e-12);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = crate::rng::SplitMix64::new(1);
        let n = 12;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let x = rng.uniform(-1.0, 1.0);
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        let (w, v) = sym_eigen_desc(&a).unwrap();
        let recon = v.dot(&Array2::from_diag(&w)).dot(&v.t());
        for i in 0..n {
            for j in 0..n {
                assert_abs_diff_eq!(recon[[i, j]], a[[i, j]], epsilon = 1e-10);
            }
        }
        // Orthonormality.
        let g = v.t().dot(&v);
        for i in 0..n {
            for j in 0..n {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[[i, j]], expect, epsilon = 1e-10);
            }
        }
        // Descending order.
        for i in 1..n {
            assert!(w[i - 1] >= w[i] - 1e-12);
        }
    }

    #[test]
    fn eigen_of_zero_matrix_is_identity_basis() {
        let a = Array2::<f64>::zeros((4, 4));
        let (w, v) = sym_eigen_desc(&a).unwrap();
        assert!(w.iter().all(|&x| x == 0.0));
        let g = v.t().dot(&v);
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(g[[i, j]], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn principal_angle_of_identical_spaces_is_zero() {
        let a = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let angle = max_principal_angle(&a, &a).unwrap();
        assert!(angle < 1e-7);
    }

    #[test]
    fn principal_angle_of_orthogonal_spaces_is_right_angle() {
        let a = array![[1.0], [0.0], [0.0]];
        let b = array![[0.0], [1.0], [0.0]];
        let angle = max_principal_angle(&a, &b).unwrap();
        assert_abs_diff_eq!(angle, std::f64::consts::FRAC_PI_2, epsilon = 1e-7);
    }

    #[test]
    fn rejects_non_square() {
        let a = Array2::<f64>::zeros((2, 3));
        assert!(sym_eigen_desc(&a).is_err());
    }
}
