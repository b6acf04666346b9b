//! Small dense linear algebra on `f64` matrices.
//!
//! Everything the pipeline needs reduces to Cholesky factorization plus a
//! symmetric eigensolver; the generalized eigenproblem is handled by
//! whitening, so no general-purpose eigen routine is required. Jacobi
//! rotations are used for the symmetric solve: they are slow for very large
//! matrices but the scatter and covariance matrices here are at most a few
//! hundred rows, and Jacobi is backward stable and has no convergence
//! surprises on nearly-degenerate spectra.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// `(M + M^T) / 2`, used to undo float-level asymmetry from accumulation.
pub fn symmetrize(m: &Array2<f64>) -> Array2<f64> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut out = m.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[[i, j]] + m[[j, i]]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Maximum relative asymmetry `|m_ij - m_ji| / scale`.
pub fn asymmetry(m: &ArrayView2<f64>) -> f64 {
    let n = m.nrows();
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs() / scale);
        }
    }
    worst
}

/// Lower-triangular Cholesky factor `L` with `L L^T = a`.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { min_eig: s });
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solve `L^T x = y` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Array2<f64>, y: &ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solve `A x = b` given the Cholesky factor `L` of `A`.
pub fn chol_solve(l: &Array2<f64>, b: &ArrayView1<f64>) -> Array1<f64> {
    let y = solve_lower(l, b);
    solve_lower_transpose(l, &y.view())
}

/// Column-by-column `A^{-1} B` given the Cholesky factor `L` of `A`.
pub fn chol_solve_matrix(l: &Array2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&chol_solve(l, &col));
    }
    out
}

/// `log det A` from its Cholesky factor.
pub fn chol_logdet(l: &Array2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` sorted by descending eigenvalue;
/// eigenvectors are the columns of the returned matrix.
pub fn sym_eig(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimMismatch(format!(
            "sym_eig needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if let Some((i, j)) = a.indexed_iter().find(|(_, v)| !v.is_finite()).map(|(p, _)| p) {
        return Err(Error::InvalidParameter(format!(
            "sym_eig input has non-finite entry at ({i}, {j})"
        )));
    }
    let mut m = symmetrize(a);
    let mut v = Array2::<f64>::eye(n);
    let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1e-300);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(m[[p, q]].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
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
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vectors = Array2::<f64>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((eigenvalues, vectors))
}

/// Thin SVD `A = U diag(s) V^T` by one-sided Jacobi on the columns of `A`.
///
/// Intended for small alignment problems (Procrustes); singular values are
/// returned unsorted-by-construction then sorted descending.
pub fn svd_jacobi(a: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    let mut u = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += u[[i, p]] * u[[i, p]];
                    beta += u[[i, q]] * u[[i, q]];
                    gamma += u[[i, p]] * u[[i, q]];
                }
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt().max(1e-300) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[[i, p]];
                    let uq = u[[i, q]];
                    u[[i, p]] = c * up - s * uq;
                    u[[i, q]] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[[i, p]];
                    let vq = v[[i, q]];
                    v[[i, p]] = c * vp - s * vq;
                    v[[i, q]] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = Array1::<f64>::zeros(n);
    for j in 0..n {
        let norm = u.column(j).dot(&u.column(j)).sqrt();
        sigma[j] = norm;
        if norm > 0.0 {
            u.column_mut(j).mapv_inplace(|x| x / norm);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut us = Array2::<f64>::zeros((m, n));
    let mut vs = Array2::<f64>::zeros((n, n));
    let mut ss = Array1::<f64>::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        us.column_mut(dst).assign(&u.column(src));
        vs.column_mut(dst).assign(&v.column(src));
        ss[dst] = sigma[src];
    }
    (us, ss, vs)
}
