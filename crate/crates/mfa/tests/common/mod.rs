//! Shared test oracles, independent of the library's computation paths:
//! dense Gauss-Jordan solves and inverses, a dense LU log-determinant, and a
//! textbook threshold-Jacobi eigensolver written separately from the
//! library's cyclic implementation. Also provides the fixed synthetic
//! ground-truth model shared by the trainer acceptance criteria.

#![allow(dead_code)]

use mfa::model::{MfaComponent, MfaModel, PrecisionComponent, PrecisionModel, PsiMode};
use mfa::rng::CounterRng;
use nalgebra::{DMatrix, DVector};

/// Gauss-Jordan solve with partial pivoting on the augmented system.
pub fn dense_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.set_column(n, b);
    for col in 0..n {
        let mut best = col;
        for row in col + 1..n {
            if aug[(row, col)].abs() > aug[(best, col)].abs() {
                best = row;
            }
        }
        aug.swap_rows(col, best);
        let pivot = aug[(col, col)];
        for j in col..=n {
            aug[(col, j)] /= pivot;
        }
        for row in 0..n {
            if row != col {
                let f = aug[(row, col)];
                if f != 0.0 {
                    for j in col..=n {
                        aug[(row, j)] -= f * aug[(col, j)];
                    }
                }
            }
        }
    }
    DVector::from_fn(n, |i, _| aug[(i, n)])
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let e = DVector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
        out.set_column(j, &dense_solve(a, &e));
    }
    out
}

/// Log-determinant of a positive-definite matrix via partially pivoted LU.
pub fn dense_logdet(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut lu = a.clone();
    let mut logdet = 0.0;
    for col in 0..n {
        let mut best = col;
        for row in col + 1..n {
            if lu[(row, col)].abs() > lu[(best, col)].abs() {
                best = row;
            }
        }
        lu.swap_rows(col, best);
        let pivot = lu[(col, col)];
        logdet += pivot.abs().ln();
        for row in col + 1..n {
            let f = lu[(row, col)] / pivot;
            for j in col..n {
                lu[(row, j)] -= f * lu[(col, j)];
            }
        }
    }
    logdet
}

/// Threshold-Jacobi eigensolver, written independently of the library's
/// cyclic sweep: each pass annihilates only entries above a shrinking
/// threshold and rotations are applied via explicit matrix products.
/// Returns eigenvalues ascending with matching eigenvector columns.
pub fn oracle_sym_eig(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut work = a.clone();
    let mut vecs: DMatrix<f64> = DMatrix::identity(n, n);
    for _pass in 0..200 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off = off.max(work[(i, j)].abs());
                }
            }
        }
        if off < 1e-13 {
            break;
        }
        let threshold = off * 0.5;
        for p in 0..n {
            for q in 0..n {
                if p == q || work[(p, q)].abs() < threshold {
                    continue;
                }
                let apq = work[(p, q)];
                let phi = 0.5 * (2.0 * apq).atan2(work[(p, p)] - work[(q, q)]);
                let (s, c) = phi.sin_cos();
                let mut rot: DMatrix<f64> = DMatrix::identity(n, n);
                rot[(p, p)] = c;
                rot[(q, q)] = c;
                rot[(p, q)] = -s;
                rot[(q, p)] = s;
                work = rot.transpose() * &work * &rot;
                vecs = &vecs * &rot;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| work[(i, i)].partial_cmp(&work[(j, j)]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| work[(i, i)]).collect();
    let mut sorted_vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        sorted_vecs.set_column(dst, &vecs.column(src).clone_owned());
    }
    (vals, sorted_vecs)
}

pub fn random_loading(rng: &mut CounterRng, d: usize, m: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(d, m, |_, _| rng.normal() * scale)
}

/// Random covariance-form model with weights summing to one.
pub fn random_cov_model(seed: u64, k: usize, d: usize, m: usize) -> MfaModel {
    let mut rng = CounterRng::new(seed);
    let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.next_f64()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let comps = weights
        .iter()
        .map(|&w| {
            MfaComponent::new(
                w,
                DVector::from_fn(d, |_, _| rng.normal() * 2.0),
                random_loading(&mut rng, d, m, 0.6),
                DVector::from_fn(d, |_, _| 0.2 + rng.next_f64()),
            )
            .unwrap()
        })
        .collect();
    MfaModel::new(comps, PsiMode::Free).unwrap()
}

/// Random precision-form model with every `M_k` safely positive-definite.
pub fn random_precision_model(seed: u64, k: usize, d: usize, m: usize) -> PrecisionModel {
    let mut rng = CounterRng::new(seed);
    let mut weights: Vec<f64> = (0..k).map(|_| 0.2 + rng.next_f64()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let comps = weights
        .iter()
        .map(|&w| {
            let scale = 0.3 / (m.max(1) as f64).sqrt();
            PrecisionComponent::new(
                w,
                DVector::from_fn(d, |_, _| rng.normal()),
                DVector::from_fn(d, |_, _| 0.8 + rng.next_f64()),
                random_loading(&mut rng, d, m, scale),
            )
            .unwrap()
        })
        .collect();
    PrecisionModel::new(comps, 1e-4, 20.0).unwrap()
}

/// The fixed ground-truth model behind the synthetic acceptance dataset:
/// K = 3 factor analyzers in 10 dimensions with 2 latent directions each.
pub fn acceptance_truth() -> MfaModel {
    let mut rng = CounterRng::new(2024);
    let weights = [0.5, 0.3, 0.2];
    let comps: Vec<MfaComponent> = (0..3)
        .map(|k| {
            MfaComponent::new(
                weights[k],
                DVector::from_fn(10, |_, _| rng.uniform(-2.0, 2.0)),
                random_loading(&mut rng, 10, 2, 0.6),
                DVector::from_fn(10, |_, _| 0.2 + 0.3 * rng.next_f64()),
            )
            .unwrap()
        })
        .collect();
    MfaModel::new(comps, PsiMode::Free).unwrap()
}

/// Dense covariance matrix of a covariance-form component.
pub fn dense_sigma(comp: &MfaComponent) -> DMatrix<f64> {
    let mut sigma = &comp.loading * comp.loading.transpose();
    for i in 0..comp.dim() {
        sigma[(i, i)] += comp.noise[i];
    }
    sigma
}
