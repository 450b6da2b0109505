//! Small dense linear algebra helpers shared by the editor and the analysis
//! toolkit: Cholesky factorization (the positive-definiteness oracle for the
//! key covariance), a symmetric Jacobi eigensolver for PCA, and a guarded
//! cosine. Everything is f64 and fixed-order so results are reproducible.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor of a symmetric matrix. Fails if the
/// matrix is not positive definite, which doubles as the PD check for
/// covariance estimates.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Linalg(format!(
            "cholesky expects a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Linalg(format!(
                        "matrix is not positive definite (pivot {} at row {})",
                        sum, i
                    )));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b given the lower Cholesky factor of A (forward then back
/// substitution).
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = l.nrows();
    if b.len() != n {
        return Err(Error::Linalg(format!(
            "solve dimension mismatch: factor is {}x{}, rhs has {}",
            n,
            l.ncols(),
            b.len()
        )));
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching eigenvector columns.
pub fn sym_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Linalg("eigensolver expects a square matrix".into()));
    }
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius(&m)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
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
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut vals = Array1::<f64>::zeros(n);
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vals[dst] = m[[src, src]];
        for k in 0..n {
            vecs[[k, dst]] = v[[k, src]];
        }
    }
    Ok((vals, vecs))
}

/// Cosine similarity with a small-norm guard so degenerate vectors yield a
/// defined value instead of NaN.
pub fn guarded_cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let eps = 1e-12;
    let na = a.dot(a).sqrt().max(eps);
    let nb = b.dot(b).sqrt().max(eps);
    a.dot(b) / (na * nb)
}

pub fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_norm(a: &Array1<f64>) -> f64 {
    a.dot(a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_recovers_known_factor() {
        // A = L L^T with L = [[2,0],[1,3]]
        let a = array![[4.0, 2.0], [2.0, 10.0]];
        let l = cholesky(&a).unwrap();
        assert!((l[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((l[[1, 0]] - 1.0).abs() < 1e-12);
        assert!((l[[1, 1]] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(&a).is_err());
    }

    #[test]
    fn solve_matches_direct_inverse() {
        let a = array![[4.0, 2.0], [2.0, 10.0]];
        let l = cholesky(&a).unwrap();
        let b = array![6.0, 12.0];
        let x = cholesky_solve(&l, &b).unwrap();
        // direct: A^-1 = 1/36 [[10,-2],[-2,4]]
        let expect = array![
            (10.0 * 6.0 - 2.0 * 12.0) / 36.0,
            (-2.0 * 6.0 + 4.0 * 12.0) / 36.0
        ];
        assert!((x[0] - expect[0]).abs() < 1e-12);
        assert!((x[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn eigen_diagonalizes_symmetric_matrix() {
        let a = array![[2.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let (vals, vecs) = sym_eigen(&a).unwrap();
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        // reconstruct and compare
        let mut recon = Array2::<f64>::zeros((3, 3));
        for c in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    recon[[i, j]] += vals[c] * vecs[[i, c]] * vecs[[j, c]];
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                assert!((recon[[i, j]] - a[[i, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn guarded_cosine_handles_zero_vector() {
        let a = array![0.0, 0.0];
        let b = array![1.0, 0.0];
        assert_eq!(guarded_cosine(&a, &b), 0.0);
    }
}
