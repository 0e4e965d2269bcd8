//! Constrained mini-batch gradient training of the precision-parameterized
//! model from random initial conditions.
//!
//! Training ascends the mini-batch log-likelihood with plain SGD. Mixture
//! weights are kept on the simplex by training softmax logits, the precision
//! diagonals stay positive by parameterizing `E = sqrt_prec^2`, and after
//! every step a constraint pass re-diagonalizes each small matrix `M_k`,
//! floors its eigenvalues at `m_min` by rescaling the offending loading
//! columns, and clips `E` into `(E_FLOOR, d_max]`.
//!
//! The schedule has two phases: only the means move during phase one; all
//! parameters move in phase two, with per-parameter gradient weights.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::em::FitReport;
use crate::error::{MfaError, Result};
use crate::linalg::{logsumexp, sym_eig_small};
use crate::model::{softmax_rows, total_loglik, PrecisionComponent, PrecisionModel};
use crate::rng::CounterRng;

/// Lower clip for the precision diagonal `E`, mirroring the noise floor of
/// the covariance parameterization.
pub const E_FLOOR: f64 = 1e-6;

/// Configuration for [`fit_sgd`].
#[derive(Debug, Clone)]
pub struct SgdConfig {
    /// Epochs in phase one (means only).
    pub epochs_phase1: usize,
    /// Epochs in phase two (all parameters).
    pub epochs_phase2: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Gradient weight for the means.
    pub weight_mean: f64,
    /// Gradient weight for the precision diagonals.
    pub weight_sqrt_prec: f64,
    /// Gradient weight for the precision loadings.
    pub weight_loading: f64,
    /// Upper clip for the precision diagonal `E`.
    pub d_max: f64,
    /// Eigenvalue floor for the small matrices `M_k`.
    pub m_min: f64,
    /// Initialization target: `M_k = (1 - m_init) I` at step zero.
    pub m_init: f64,
    /// Means initialize uniformly inside this range.
    pub centroid_init_range: (f64, f64),
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            epochs_phase1: 15,
            epochs_phase2: 50,
            batch_size: 100,
            learning_rate: 0.01,
            weight_mean: 1.0,
            weight_sqrt_prec: 0.1,
            weight_loading: 0.1,
            d_max: 20.0,
            m_min: 1e-4,
            m_init: 1e-4,
            centroid_init_range: (-0.1, 0.1),
            seed: 0,
        }
    }
}

/// Ascent gradients for one component.
#[derive(Debug, Clone)]
pub struct ComponentGrad {
    pub d_mean: DVector<f64>,
    pub d_sqrt_prec: DVector<f64>,
    pub d_prec_loading: DMatrix<f64>,
    pub d_logit: f64,
}

/// Gradients of the mini-batch log-likelihood for every component.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub components: Vec<ComponentGrad>,
}

/// Largest double whose square does not exceed `v`.
fn sqrt_round_down(v: f64) -> f64 {
    let mut s = v.sqrt();
    while s * s > v {
        s = f64::from_bits(s.to_bits() - 1);
    }
    s
}

/// Smallest double whose square is at least `v`.
fn sqrt_round_up(v: f64) -> f64 {
    let mut s = v.sqrt();
    while s * s < v {
        s = f64::from_bits(s.to_bits() + 1);
    }
    s
}

/// Analytic gradients of the mini-batch log-likelihood
/// `sum_n log sum_k pi_k p_k(x_n)` with respect to the means, the precision
/// diagonal square roots, the precision loadings, and the mixture logits
/// (`pi = softmax(logits)`). Also returns the batch log-likelihood itself.
///
/// Gradients point in the ascent direction. Errors if any `M_k` is not
/// positive-definite; the constraint pass must run first.
pub fn batch_grad(model: &PrecisionModel, batch: &DMatrix<f64>) -> Result<(GradientSet, f64)> {
    let (k, d, m) = model.dims();
    if batch.ncols() != d {
        return Err(MfaError::DimensionMismatch {
            expected: d,
            got: batch.ncols(),
            context: "batch_grad data dimension",
        });
    }
    let n = batch.nrows();

    struct CompState {
        prec_diag: DVector<f64>,
        /// Diagonal of `P^{-1} = Sigma`, computed via the Woodbury identity.
        sigma_diag: DVector<f64>,
        /// `Sigma Gamma = E^{-1} Gamma M^{-1}` (D x M).
        sigma_gamma: DMatrix<f64>,
        logdet_p: f64,
    }

    let mut states = Vec::with_capacity(k);
    for (c, comp) in model.components.iter().enumerate() {
        let prec_diag = comp.prec_diag();
        let small = comp.small_m();
        let eig = sym_eig_small(&small)?;
        let mut logdet_m = 0.0;
        for &ev in eig.eigenvalues.iter() {
            if ev <= 0.0 {
                return Err(MfaError::IndefinitePrecision {
                    component: c,
                    eigenvalue: ev,
                });
            }
            logdet_m += ev.ln();
        }
        let logdet_p = logdet_m + prec_diag.iter().map(|e| e.ln()).sum::<f64>();

        // B = E^{-1} Gamma, M^{-1} = Q diag(1/eig) Q^T.
        let mut b = comp.prec_loading.clone();
        for i in 0..d {
            let inv_e = 1.0 / prec_diag[i];
            for j in 0..m {
                b[(i, j)] *= inv_e;
            }
        }
        let mut m_inv = DMatrix::zeros(m, m);
        for a in 0..m {
            for bb in 0..m {
                let mut s = 0.0;
                for t in 0..m {
                    s += eig.eigenvectors[(a, t)] * eig.eigenvectors[(bb, t)]
                        / eig.eigenvalues[t];
                }
                m_inv[(a, bb)] = s;
            }
        }
        let bm = &b * &m_inv;
        let mut sigma_diag = DVector::zeros(d);
        for i in 0..d {
            let mut s = 1.0 / prec_diag[i];
            for j in 0..m {
                s += bm[(i, j)] * b[(i, j)];
            }
            sigma_diag[i] = s;
        }
        states.push(CompState {
            prec_diag,
            sigma_diag,
            sigma_gamma: bm,
            logdet_p,
        });
    }

    // Pass one: weighted scores for responsibilities and the batch
    // log-likelihood.
    let mut scores = DMatrix::zeros(n, k);
    let ln_2pi_term = d as f64 * crate::model::LN_2PI;
    for (c, comp) in model.components.iter().enumerate() {
        let st = &states[c];
        let log_weight = comp.weight.ln();
        for i in 0..n {
            let mut quad = 0.0;
            for j in 0..d {
                let cj = batch[(i, j)] - comp.mean[j];
                quad += st.prec_diag[j] * cj * cj;
            }
            let mut proj_sq = 0.0;
            for a in 0..m {
                let mut p = 0.0;
                for j in 0..d {
                    p += comp.prec_loading[(j, a)] * (batch[(i, j)] - comp.mean[j]);
                }
                proj_sq += p * p;
            }
            scores[(i, c)] =
                log_weight - 0.5 * (ln_2pi_term - st.logdet_p + quad - proj_sq);
        }
    }
    let resp = softmax_rows(&scores)?;
    let mut batch_ll = 0.0;
    {
        let mut row = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                row[c] = scores[(i, c)];
            }
            batch_ll += logsumexp(&row)?;
        }
    }

    // Pass two: accumulate gradients.
    let mut grads = Vec::with_capacity(k);
    for (c, comp) in model.components.iter().enumerate() {
        let st = &states[c];
        let mut d_mean = DVector::zeros(d);
        let mut d_sqrt_prec = DVector::zeros(d);
        let mut d_loading = DMatrix::zeros(d, m);
        let mut resp_sum = 0.0;
        let mut centered = DVector::zeros(d);
        let mut proj = DVector::zeros(m);

        for i in 0..n {
            let g = resp[(i, c)];
            resp_sum += g;
            for j in 0..d {
                centered[j] = batch[(i, j)] - comp.mean[j];
            }
            for a in 0..m {
                let mut p = 0.0;
                for j in 0..d {
                    p += comp.prec_loading[(j, a)] * centered[j];
                }
                proj[a] = p;
            }
            // d/d mu: P (x - mu) = E c - Gamma (Gamma^T c)
            for j in 0..d {
                let mut v = st.prec_diag[j] * centered[j];
                for a in 0..m {
                    v -= comp.prec_loading[(j, a)] * proj[a];
                }
                d_mean[j] += g * v;
            }
            // d/d sqrt_prec (the per-sample part; the Sigma diagonal part is
            // added once below).
            for j in 0..d {
                d_sqrt_prec[j] -= g * centered[j] * centered[j];
            }
            // d/d Gamma: c (c^T Gamma) per sample.
            for j in 0..d {
                let gc = g * centered[j];
                for a in 0..m {
                    d_loading[(j, a)] += gc * proj[a];
                }
            }
        }
        for j in 0..d {
            d_sqrt_prec[j] = comp.sqrt_prec[j] * (d_sqrt_prec[j] + resp_sum * st.sigma_diag[j]);
        }
        for j in 0..d {
            for a in 0..m {
                d_loading[(j, a)] -= resp_sum * st.sigma_gamma[(j, a)];
            }
        }
        let d_logit = resp_sum - comp.weight * n as f64;
        grads.push(ComponentGrad {
            d_mean,
            d_sqrt_prec,
            d_prec_loading: d_loading,
            d_logit,
        });
    }
    Ok((
        GradientSet {
            components: grads,
        },
        batch_ll,
    ))
}

/// Constraint pass: for every component, clips `E` into `(E_FLOOR, d_max]`,
/// rotates the loading columns so `M_k` becomes diagonal, and rescales any
/// column whose eigenvalue fell below `m_min` so that it lands exactly on
/// the floor. Total on finite inputs.
pub fn apply_constraints(model: &PrecisionModel, m_min: f64, d_max: f64) -> PrecisionModel {
    let sqrt_max = sqrt_round_down(d_max);
    let sqrt_min = sqrt_round_up(E_FLOOR);

    let components = model
        .components
        .iter()
        .map(|comp| {
            let d = comp.dim();
            let m = comp.latent_dim();
            let mut sqrt_prec = comp.sqrt_prec.map(f64::abs);
            for e in sqrt_prec.iter_mut() {
                *e = e.clamp(sqrt_min, sqrt_max);
            }
            let working = PrecisionComponent {
                weight: comp.weight,
                mean: comp.mean.clone(),
                sqrt_prec: sqrt_prec.clone(),
                prec_loading: comp.prec_loading.clone(),
            };
            if m == 0 {
                return working;
            }
            let small = working.small_m();
            let eig = sym_eig_small(&small)
                .expect("M_k is symmetric by construction");
            let mut rotated = &working.prec_loading * &eig.eigenvectors;
            for col in 0..m {
                let ev = eig.eigenvalues[col];
                if ev < m_min {
                    // (M)_ii = 1 - c with c = Gamma_i^T E^{-1} Gamma_i;
                    // rescale so the diagonal entry lands exactly on m_min.
                    let c = 1.0 - ev;
                    let factor = ((1.0 - m_min) / c).sqrt();
                    for row in 0..d {
                        rotated[(row, col)] *= factor;
                    }
                }
            }
            PrecisionComponent {
                weight: comp.weight,
                mean: comp.mean.clone(),
                sqrt_prec,
                prec_loading: rotated,
            }
        })
        .collect();

    PrecisionModel {
        components,
        m_min,
        d_max,
    }
}

/// Which parameters a step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Phase one: means only.
    MeansOnly,
    /// Phase two: means, precisions, loadings, and mixture logits.
    All,
}

/// Stepwise SGD trainer. [`fit_sgd`] drives it through the two-phase
/// schedule; it can also be stepped manually for streaming use.
#[derive(Debug, Clone)]
pub struct SgdTrainer {
    model: PrecisionModel,
    logits: DVector<f64>,
    config: SgdConfig,
}

impl SgdTrainer {
    /// Random initialization: means uniform in `centroid_init_range`,
    /// `E = d_max I`, loadings with orthonormal columns scaled so that
    /// `M_k = (1 - m_init) I`, uniform mixture weights.
    pub fn new(d: usize, k: usize, m: usize, config: &SgdConfig) -> Result<Self> {
        if k == 0 {
            return Err(MfaError::EmptyInput("sgd: k must be at least 1"));
        }
        if m >= d {
            return Err(MfaError::InvalidModel(format!(
                "latent dimension {m} must be below data dimension {d}"
            )));
        }
        let mut rng = CounterRng::new(config.seed);
        let sqrt_max = sqrt_round_down(config.d_max);
        let gamma_scale = (config.m_init * config.d_max).sqrt();

        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let mean = DVector::from_fn(d, |_, _| {
                rng.uniform(config.centroid_init_range.0, config.centroid_init_range.1)
            });
            let sqrt_prec = DVector::from_element(d, sqrt_max);
            let mut loading = DMatrix::zeros(d, m);
            // Random orthonormal columns by modified Gram-Schmidt.
            for col in 0..m {
                loop {
                    let mut v = DVector::from_fn(d, |_, _| rng.normal());
                    for prev in 0..col {
                        let mut dot = 0.0;
                        for row in 0..d {
                            dot += v[row] * loading[(row, prev)];
                        }
                        for row in 0..d {
                            v[row] -= dot * loading[(row, prev)];
                        }
                    }
                    let norm = v.norm();
                    if norm > 1e-8 {
                        for row in 0..d {
                            loading[(row, col)] = v[row] / norm;
                        }
                        break;
                    }
                }
            }
            loading *= gamma_scale;
            components.push(PrecisionComponent::new(
                1.0 / k as f64,
                mean,
                sqrt_prec,
                loading,
            )?);
        }
        let model = PrecisionModel::new(components, config.m_min, config.d_max)?;
        Ok(SgdTrainer {
            model,
            logits: DVector::zeros(k),
            config: config.clone(),
        })
    }

    pub fn model(&self) -> &PrecisionModel {
        &self.model
    }

    pub fn into_model(self) -> PrecisionModel {
        self.model
    }

    /// One SGD step on a mini-batch followed by the constraint pass.
    /// Returns the batch log-likelihood before the update.
    ///
    /// The update uses the per-sample mean gradient (the batch-sum gradient
    /// from [`batch_grad`] divided by the batch size), so the step size does
    /// not scale with the batch size.
    pub fn step(&mut self, batch: &DMatrix<f64>, phase: Phase) -> Result<f64> {
        let (grads, batch_ll) = batch_grad(&self.model, batch)?;
        let lr = self.config.learning_rate / batch.nrows().max(1) as f64;

        for (c, grad) in grads.components.iter().enumerate() {
            let comp = &mut self.model.components[c];
            comp.mean.axpy(lr * self.config.weight_mean, &grad.d_mean, 1.0);
            if phase == Phase::All {
                comp.sqrt_prec
                    .axpy(lr * self.config.weight_sqrt_prec, &grad.d_sqrt_prec, 1.0);
                let step = lr * self.config.weight_loading;
                comp.prec_loading
                    .zip_apply(&grad.d_prec_loading, |v, g| *v += step * g);
                self.logits[c] += lr * grad.d_logit;
            }
        }
        if phase == Phase::All {
            let max_logit = self.logits.max();
            let mut total = 0.0;
            for l in self.logits.iter() {
                total += (l - max_logit).exp();
            }
            for (c, l) in self.logits.iter().enumerate() {
                self.model.components[c].weight = (l - max_logit).exp() / total;
            }
        }
        self.model = apply_constraints(&self.model, self.config.m_min, self.config.d_max);
        Ok(batch_ll)
    }
}

/// Fits the precision-parameterized model by constrained two-phase SGD from
/// random initial conditions. The report's trace holds the full-data
/// log-likelihood at the end of each epoch. Deterministic given the seed.
pub fn fit_sgd(
    x: &DMatrix<f64>,
    k: usize,
    m: usize,
    config: &SgdConfig,
) -> Result<(PrecisionModel, FitReport)> {
    let start = Instant::now();
    let n = x.nrows();
    let d = x.ncols();
    if n == 0 {
        return Err(MfaError::EmptyInput("fit_sgd data"));
    }
    if config.batch_size == 0 {
        return Err(MfaError::EmptyInput("fit_sgd batch size"));
    }

    let mut trainer = SgdTrainer::new(d, k, m, config)?;
    // Separate stream for shuffling so initialization draws stay fixed.
    let mut shuffle_rng = CounterRng::new(config.seed ^ 0x5851_F42D_4C95_7F2D);

    let total_epochs = config.epochs_phase1 + config.epochs_phase2;
    let mut trace = Vec::with_capacity(total_epochs);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut batch = DMatrix::zeros(config.batch_size, d);

    for epoch in 0..total_epochs {
        let phase = if epoch < config.epochs_phase1 {
            Phase::MeansOnly
        } else {
            Phase::All
        };
        shuffle_rng.shuffle(&mut indices);
        let mut offset = 0;
        while offset < n {
            let size = config.batch_size.min(n - offset);
            if batch.nrows() != size {
                batch = DMatrix::zeros(size, d);
            }
            for (bi, &src) in indices[offset..offset + size].iter().enumerate() {
                for j in 0..d {
                    batch[(bi, j)] = x[(src, j)];
                }
            }
            trainer.step(&batch, phase)?;
            offset += size;
        }
        trace.push(total_loglik(trainer.model(), x)?);
    }

    let report = FitReport {
        iterations_run: trace.len(),
        loglik_trace: trace,
        converged: true,
        wall_time: start.elapsed().as_secs_f64(),
        regularization_events: 0,
    };
    Ok((trainer.into_model(), report))
}
