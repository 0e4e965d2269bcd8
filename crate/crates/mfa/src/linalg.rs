//! Low-rank-plus-diagonal linear algebra primitives.
//!
//! Everything here works on `Sigma = Lambda Lambda^T + diag(psi)` without ever
//! forming the D x D matrix: the Woodbury identity reduces the inverse action
//! to an M x M solve and the matrix determinant lemma reduces the
//! log-determinant to an M x M factorization plus a diagonal sum. The small
//! dense kernels (pivoted elimination, Cholesky, cyclic Jacobi
//! eigendecomposition) are intended for M up to a few dozen.
//!
//! All functions are pure; they can be called concurrently without locking.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfaError, Result};

/// Smallest pivot magnitude accepted by [`solve_small`].
const PIVOT_MIN: f64 = 1e-300;

/// Off-diagonal Frobenius norm at which the Jacobi sweep stops.
const JACOBI_TOL: f64 = 1e-12;

/// Relative asymmetry tolerated by [`sym_eig_small`].
const SYMMETRY_TOL: f64 = 1e-12;

/// Eigendecomposition of a small symmetric matrix: `a = vecs * diag(vals) * vecs^T`.
///
/// Eigenvalues are sorted in descending order; column `i` of `eigenvectors`
/// pairs with `eigenvalues[i]`. The first nonzero entry of each eigenvector
/// is non-negative, so results are deterministic across runs.
#[derive(Debug, Clone)]
pub struct SymEigResult {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

/// Numerically stable `log(sum_i exp(v_i))`.
///
/// Accepts finite entries and negative infinity; returns negative infinity
/// when every entry is. Errors on empty input.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(MfaError::EmptyInput("logsumexp"));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = v.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

fn check_psi(psi: &DVector<f64>) -> Result<()> {
    for (i, &p) in psi.iter().enumerate() {
        if !(p > 0.0) {
            return Err(MfaError::NonPositiveDiagonal { index: i, value: p });
        }
    }
    Ok(())
}

/// Applies `Sigma^{-1}` to `v` for `Sigma = lambda lambda^T + diag(psi)` and
/// returns `beta = lambda^T Sigma^{-1}` as an M x D matrix.
///
/// Uses the Woodbury identity
/// `Sigma^{-1} = Psi^{-1} - Psi^{-1} L (I + L^T Psi^{-1} L)^{-1} L^T Psi^{-1}`;
/// only the inner M x M system is ever factorized. A singular inner system
/// signals degenerate loadings and is reported as an error.
pub fn lowrank_inverse_action(
    lambda: &DMatrix<f64>,
    psi: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = lambda.nrows();
    let m = lambda.ncols();
    check_psi(psi)?;
    if psi.len() != d || v.len() != d {
        return Err(MfaError::DimensionMismatch {
            expected: d,
            got: if psi.len() != d { psi.len() } else { v.len() },
            context: "lowrank_inverse_action",
        });
    }

    // a = lambda^T Psi^{-1}  (M x D)
    let mut a = lambda.transpose();
    for j in 0..d {
        let inv = 1.0 / psi[j];
        for i in 0..m {
            a[(i, j)] *= inv;
        }
    }
    // inner system L = I + lambda^T Psi^{-1} lambda
    let mut inner = &a * lambda;
    for i in 0..m {
        inner[(i, i)] += 1.0;
    }
    // beta = L^{-1} a, one factorization for all D right-hand sides
    let beta = solve_small(&inner, &a)?;

    // Sigma^{-1} v = Psi^{-1} (v - lambda (beta v))
    let t = &beta * v;
    let mut result = v - lambda * t;
    for j in 0..d {
        result[j] /= psi[j];
    }
    Ok((result, beta))
}

/// `log det(lambda lambda^T + diag(psi))` via the matrix determinant lemma:
/// `log det L + sum_i log psi_i` with `L = I + lambda^T Psi^{-1} lambda`.
pub fn lowrank_logdet(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<f64> {
    let d = lambda.nrows();
    let m = lambda.ncols();
    check_psi(psi)?;
    if psi.len() != d {
        return Err(MfaError::DimensionMismatch {
            expected: d,
            got: psi.len(),
            context: "lowrank_logdet",
        });
    }

    let mut inner = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let mut s = 0.0;
            for r in 0..d {
                s += lambda[(r, i)] * lambda[(r, j)] / psi[r];
            }
            inner[(i, j)] = s;
            inner[(j, i)] = s;
        }
        inner[(i, i)] += 1.0;
    }
    let logdet_inner = logdet_cholesky(&inner)?;
    Ok(logdet_inner + psi.iter().map(|p| p.ln()).sum::<f64>())
}

/// Log-determinant of a symmetric positive-definite matrix via Cholesky.
/// Errors with [`MfaError::NotPositiveDefinite`] when a pivot is not positive.
fn logdet_cholesky(a: &DMatrix<f64>) -> Result<f64> {
    let n = a.nrows();
    let mut l = a.clone();
    let mut logdet = 0.0;
    for j in 0..n {
        let mut diag = l[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return Err(MfaError::NotPositiveDefinite);
        }
        let root = diag.sqrt();
        logdet += root.ln();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut s = l[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    Ok(2.0 * logdet)
}

/// Solves `a x = b` for square `a` and an M x R right-hand side by Gaussian
/// elimination with partial pivoting. A pivot below `1e-300` is reported as
/// a singular-matrix error.
pub fn solve_small(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(MfaError::DimensionMismatch {
            expected: n,
            got: a.ncols(),
            context: "solve_small: matrix not square",
        });
    }
    if b.nrows() != n {
        return Err(MfaError::DimensionMismatch {
            expected: n,
            got: b.nrows(),
            context: "solve_small: rhs rows",
        });
    }
    let r = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu[(col, col)].abs();
        for row in (col + 1)..n {
            let v = lu[(row, col)].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val < PIVOT_MIN {
            return Err(MfaError::SingularMatrix { pivot: pivot_val });
        }
        if pivot_row != col {
            lu.swap_rows(col, pivot_row);
            x.swap_rows(col, pivot_row);
        }
        let pivot = lu[(col, col)];
        for row in (col + 1)..n {
            let factor = lu[(row, col)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in (col + 1)..n {
                lu[(row, j)] -= factor * lu[(col, j)];
            }
            for j in 0..r {
                x[(row, j)] -= factor * x[(col, j)];
            }
        }
    }
    for col in (0..n).rev() {
        let pivot = lu[(col, col)];
        for j in 0..r {
            let mut s = x[(col, j)];
            for k in (col + 1)..n {
                s -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = s / pivot;
        }
    }
    Ok(x)
}

/// Convenience wrapper of [`solve_small`] for a single right-hand side.
pub fn solve_small_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    let x = solve_small(a, &rhs)?;
    Ok(DVector::from_column_slice(x.column(0).as_slice()))
}

/// Full eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Sweeps continue until the off-diagonal Frobenius norm drops
/// below `1e-12`. Asymmetry beyond a relative `1e-12` is rejected.
pub fn sym_eig_small(a: &DMatrix<f64>) -> Result<SymEigResult> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(MfaError::DimensionMismatch {
            expected: n,
            got: a.ncols(),
            context: "sym_eig_small: matrix not square",
        });
    }
    let scale = a.iter().fold(0.0f64, |acc, &x| acc.max(x.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            let diff = (a[(i, j)] - a[(j, i)]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(MfaError::NotSymmetric { i, j, diff });
            }
        }
    }

    let mut work = a.clone();
    // Symmetrize exactly so rotations keep the matrix symmetric.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (work[(i, j)] + work[(j, i)]);
            work[(i, j)] = avg;
            work[(j, i)] = avg;
        }
    }
    let mut vecs: DMatrix<f64> = DMatrix::identity(n, n);

    let off_norm = |m: &DMatrix<f64>| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        s.sqrt()
    };

    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        if off_norm(&work) < JACOBI_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = work[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle that annihilates work[p][q].
                let theta = 0.5 * (work[(q, q)] - work[(p, p)]) / apq;
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = work[(k, p)];
                    let akq = work[(k, q)];
                    work[(k, p)] = c * akp - s * akq;
                    work[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = work[(p, k)];
                    let aqk = work[(q, k)];
                    work[(p, k)] = c * apk - s * aqk;
                    work[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vecs[(k, p)];
                    let vkq = vecs[(k, q)];
                    vecs[(k, p)] = c * vkp - s * vkq;
                    vecs[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        work[(j, j)]
            .partial_cmp(&work[(i, i)])
            .expect("eigenvalues are finite")
    });

    let mut eigenvalues = DVector::zeros(n);
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues[dst] = work[(src, src)];
        let mut sign = 1.0;
        for k in 0..n {
            let v = vecs[(k, src)];
            if v != 0.0 {
                sign = if v < 0.0 { -1.0 } else { 1.0 };
                break;
            }
        }
        for k in 0..n {
            eigenvectors[(k, dst)] = sign * vecs[(k, src)];
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors,
    })
}
