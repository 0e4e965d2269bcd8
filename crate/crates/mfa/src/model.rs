//! Model data structures for both parameterizations, log-likelihoods,
//! responsibilities, precision-to-generative conversion, and sampling.
//!
//! A mixture component in covariance form has covariance
//! `Sigma_k = loading * loading^T + diag(noise)`; in precision form the
//! inverse covariance is `P_k = E_k - Gamma_k Gamma_k^T` with `E_k` the square
//! of the stored diagonal `sqrt_prec`. Component log-likelihoods exclude the
//! mixture weight; weighting happens once, in the shared mixture layer, so
//! both parameterizations go through the same responsibility and total
//! log-likelihood code.

use nalgebra::{DMatrix, DVector};

use crate::error::{MfaError, Result};
use crate::linalg::{logsumexp, lowrank_inverse_action, lowrank_logdet, sym_eig_small};
use crate::rng::CounterRng;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Floor applied to noise variances by the trainers and converters. Guards
/// against the EM instability where noise entries drift to zero or below.
pub const PSI_FLOOR: f64 = 1e-6;

/// Noise-structure constraint for the covariance parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiMode {
    /// Each component keeps its own diagonal noise.
    Free,
    /// All components share one diagonal noise matrix.
    Tied,
    /// Each component's noise is a scalar multiple of the identity.
    Isotropic,
}

impl PsiMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PsiMode::Free => "free",
            PsiMode::Tied => "tied",
            PsiMode::Isotropic => "isotropic",
        }
    }

    pub fn parse(s: &str) -> Result<PsiMode> {
        match s {
            "free" => Ok(PsiMode::Free),
            "tied" => Ok(PsiMode::Tied),
            "isotropic" => Ok(PsiMode::Isotropic),
            other => Err(MfaError::InvalidModel(format!(
                "unknown psi mode {other:?} (expected free, tied, or isotropic)"
            ))),
        }
    }
}

/// One factor-analyzer component in covariance form.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaComponent {
    /// Mixture weight `pi_k` in `[0, 1]`.
    pub weight: f64,
    /// Component mean, length D.
    pub mean: DVector<f64>,
    /// Factor loading matrix, D x M.
    pub loading: DMatrix<f64>,
    /// Diagonal noise variances, length D, strictly positive.
    pub noise: DVector<f64>,
}

impl MfaComponent {
    pub fn new(
        weight: f64,
        mean: DVector<f64>,
        loading: DMatrix<f64>,
        noise: DVector<f64>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) || !weight.is_finite() {
            return Err(MfaError::InvalidModel(format!(
                "component weight {weight} outside [0, 1]"
            )));
        }
        let d = mean.len();
        if loading.nrows() != d {
            return Err(MfaError::DimensionMismatch {
                expected: d,
                got: loading.nrows(),
                context: "loading rows",
            });
        }
        if loading.ncols() > d {
            return Err(MfaError::InvalidModel(format!(
                "latent dimension {} exceeds data dimension {d}",
                loading.ncols()
            )));
        }
        if noise.len() != d {
            return Err(MfaError::DimensionMismatch {
                expected: d,
                got: noise.len(),
                context: "noise length",
            });
        }
        for (i, &p) in noise.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(MfaError::NonPositiveDiagonal { index: i, value: p });
            }
        }
        if loading.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(MfaError::InvalidModel(
                "non-finite entry in mean or loading".into(),
            ));
        }
        Ok(MfaComponent {
            weight,
            mean,
            loading,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }
}

/// Mixture of factor analyzers in covariance form; the EM-trained object.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaModel {
    pub components: Vec<MfaComponent>,
    pub psi_mode: PsiMode,
}

impl MfaModel {
    pub fn new(components: Vec<MfaComponent>, psi_mode: PsiMode) -> Result<Self> {
        if components.is_empty() {
            return Err(MfaError::EmptyInput("MfaModel components"));
        }
        let d = components[0].dim();
        let m = components[0].latent_dim();
        for c in &components {
            if c.dim() != d {
                return Err(MfaError::DimensionMismatch {
                    expected: d,
                    got: c.dim(),
                    context: "component dimension",
                });
            }
            if c.latent_dim() != m {
                return Err(MfaError::DimensionMismatch {
                    expected: m,
                    got: c.latent_dim(),
                    context: "component latent dimension",
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MfaError::InvalidModel(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        match psi_mode {
            PsiMode::Free => {}
            PsiMode::Tied => {
                for c in &components[1..] {
                    if c.noise != components[0].noise {
                        return Err(MfaError::InvalidModel(
                            "tied psi mode requires identical noise across components".into(),
                        ));
                    }
                }
            }
            PsiMode::Isotropic => {
                for (k, c) in components.iter().enumerate() {
                    let first = c.noise[0];
                    if c.noise.iter().any(|&v| v != first) {
                        return Err(MfaError::InvalidModel(format!(
                            "isotropic psi mode requires constant noise diagonal (component {k})"
                        )));
                    }
                }
            }
        }
        Ok(MfaModel {
            components,
            psi_mode,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn d(&self) -> usize {
        self.components[0].dim()
    }

    pub fn m(&self) -> usize {
        self.components[0].latent_dim()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.k(), self.d(), self.m())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }
}

/// One mixture component in precision form: `P = E - Gamma Gamma^T` with
/// `E = sqrt_prec^2` diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    /// Diagonal square root of the precision diagonal `E`, length D.
    pub sqrt_prec: DVector<f64>,
    /// Low-rank precision loading `Gamma`, D x M.
    pub prec_loading: DMatrix<f64>,
}

impl PrecisionComponent {
    pub fn new(
        weight: f64,
        mean: DVector<f64>,
        sqrt_prec: DVector<f64>,
        prec_loading: DMatrix<f64>,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&weight) || !weight.is_finite() {
            return Err(MfaError::InvalidModel(format!(
                "component weight {weight} outside [0, 1]"
            )));
        }
        let d = mean.len();
        if sqrt_prec.len() != d {
            return Err(MfaError::DimensionMismatch {
                expected: d,
                got: sqrt_prec.len(),
                context: "sqrt_prec length",
            });
        }
        if prec_loading.nrows() != d {
            return Err(MfaError::DimensionMismatch {
                expected: d,
                got: prec_loading.nrows(),
                context: "prec_loading rows",
            });
        }
        for (i, &e) in sqrt_prec.iter().enumerate() {
            if e == 0.0 || !e.is_finite() {
                return Err(MfaError::NonPositiveDiagonal { index: i, value: e });
            }
        }
        if prec_loading.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(MfaError::InvalidModel(
                "non-finite entry in mean or precision loading".into(),
            ));
        }
        Ok(PrecisionComponent {
            weight,
            mean,
            sqrt_prec,
            prec_loading,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.prec_loading.ncols()
    }

    /// The diagonal of `E = sqrt_prec^2`.
    pub fn prec_diag(&self) -> DVector<f64> {
        self.sqrt_prec.map(|e| e * e)
    }

    /// The small matrix `M = I - Gamma^T E^{-1} Gamma` (symmetric, M x M).
    pub fn small_m(&self) -> DMatrix<f64> {
        let m = self.latent_dim();
        let d = self.dim();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut s = 0.0;
                for r in 0..d {
                    let e = self.sqrt_prec[r] * self.sqrt_prec[r];
                    s += self.prec_loading[(r, i)] * self.prec_loading[(r, j)] / e;
                }
                let v = if i == j { 1.0 - s } else { -s };
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Mixture of factor analyzers in precision form; the SGD-trained object.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionModel {
    pub components: Vec<PrecisionComponent>,
    /// Eigenvalue floor for the small matrices `M_k`.
    pub m_min: f64,
    /// Upper clip for the precision diagonal `E`.
    pub d_max: f64,
}

impl PrecisionModel {
    pub fn new(components: Vec<PrecisionComponent>, m_min: f64, d_max: f64) -> Result<Self> {
        if components.is_empty() {
            return Err(MfaError::EmptyInput("PrecisionModel components"));
        }
        let d = components[0].dim();
        let m = components[0].latent_dim();
        for c in &components {
            if c.dim() != d || c.latent_dim() != m {
                return Err(MfaError::DimensionMismatch {
                    expected: d,
                    got: c.dim(),
                    context: "precision component dimension",
                });
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(MfaError::InvalidModel(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        Ok(PrecisionModel {
            components,
            m_min,
            d_max,
        })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn d(&self) -> usize {
        self.components[0].dim()
    }

    pub fn m(&self) -> usize {
        self.components[0].latent_dim()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.k(), self.d(), self.m())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// Converts every component to the generative (covariance) form.
    /// The result uses free noise mode.
    pub fn to_generative(&self) -> Result<MfaModel> {
        let comps = self
            .components
            .iter()
            .map(|c| {
                let (noise, loading) = precision_to_generative(c)?;
                MfaComponent::new(c.weight, c.mean.clone(), loading, noise)
            })
            .collect::<Result<Vec<_>>>()?;
        MfaModel::new(comps, PsiMode::Free)
    }
}

/// Posterior component weights, one row per sample, rows summing to 1.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub entries: DMatrix<f64>,
}

impl Responsibilities {
    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn k(&self) -> usize {
        self.entries.ncols()
    }
}

/// Log-likelihood of `x` under one covariance-form component, excluding the
/// mixture weight: `-1/2 (D ln 2pi + log det Sigma + (x-mu)^T Sigma^{-1} (x-mu))`.
pub fn component_loglik(comp: &MfaComponent, x: &DVector<f64>) -> Result<f64> {
    if x.len() != comp.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: comp.dim(),
            got: x.len(),
            context: "component_loglik",
        });
    }
    let centered = x - &comp.mean;
    let (sigma_inv_c, _) = lowrank_inverse_action(&comp.loading, &comp.noise, &centered)?;
    let maha = centered.dot(&sigma_inv_c);
    let logdet = lowrank_logdet(&comp.loading, &comp.noise)?;
    Ok(-0.5 * (comp.dim() as f64 * LN_2PI + logdet + maha))
}

/// Log-likelihood of `x` under one precision-form component, excluding the
/// mixture weight. Computed entirely from `E`, `Gamma`, and the M x M matrix
/// `M_k`; no D x D matrix is formed. Errors when `M_k` is not
/// positive-definite.
pub fn precision_loglik(comp: &PrecisionComponent, x: &DVector<f64>) -> Result<f64> {
    let eval = PrecisionEvaluator::new(comp, 0)?;
    if x.len() != comp.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: comp.dim(),
            got: x.len(),
            context: "precision_loglik",
        });
    }
    Ok(eval.log_density(x))
}

/// Precomputed per-component state for covariance-form batch evaluation.
pub(crate) struct CovarianceEvaluator<'a> {
    comp: &'a MfaComponent,
    psi_inv: DVector<f64>,
    /// `beta = L^{-1} Lambda^T Psi^{-1}`, M x D.
    beta: DMatrix<f64>,
    logdet: f64,
}

impl<'a> CovarianceEvaluator<'a> {
    pub fn new(comp: &'a MfaComponent) -> Result<Self> {
        let zero = DVector::zeros(comp.dim());
        let (_, beta) = lowrank_inverse_action(&comp.loading, &comp.noise, &zero)?;
        let logdet = lowrank_logdet(&comp.loading, &comp.noise)?;
        Ok(CovarianceEvaluator {
            comp,
            psi_inv: comp.noise.map(|p| 1.0 / p),
            beta,
            logdet,
        })
    }

    pub fn beta(&self) -> &DMatrix<f64> {
        &self.beta
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Mahalanobis form via Woodbury:
    /// `c^T Psi^{-1} c - (Lambda^T Psi^{-1} c) . (beta c)`.
    pub fn log_density_centered(&self, centered: &DVector<f64>) -> f64 {
        let u = centered.component_mul(&self.psi_inv);
        let au = self.comp.loading.transpose() * &u;
        let bc = &self.beta * centered;
        let maha = centered.dot(&u) - au.dot(&bc);
        -0.5 * (self.comp.dim() as f64 * LN_2PI + self.logdet + maha)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        self.log_density_centered(&(x - &self.comp.mean))
    }
}

/// Precomputed per-component state for precision-form batch evaluation.
pub(crate) struct PrecisionEvaluator<'a> {
    comp: &'a PrecisionComponent,
    prec_diag: DVector<f64>,
    logdet_p: f64,
}

impl<'a> PrecisionEvaluator<'a> {
    /// Builds the evaluator, verifying positive-definiteness of `M_k`.
    /// `component` is only used to label the error.
    pub fn new(comp: &'a PrecisionComponent, component: usize) -> Result<Self> {
        let small = comp.small_m();
        let eig = sym_eig_small(&small)?;
        let mut logdet_m = 0.0;
        for &ev in eig.eigenvalues.iter() {
            if ev <= 0.0 {
                return Err(MfaError::IndefinitePrecision {
                    component,
                    eigenvalue: ev,
                });
            }
            logdet_m += ev.ln();
        }
        let prec_diag = comp.prec_diag();
        let logdet_e: f64 = prec_diag.iter().map(|e| e.ln()).sum();
        Ok(PrecisionEvaluator {
            comp,
            prec_diag,
            logdet_p: logdet_m + logdet_e,
        })
    }

    pub fn logdet_p(&self) -> f64 {
        self.logdet_p
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let centered = x - &self.comp.mean;
        let mut quad = 0.0;
        for i in 0..centered.len() {
            quad += self.prec_diag[i] * centered[i] * centered[i];
        }
        let projected = self.comp.prec_loading.transpose() * &centered;
        quad -= projected.norm_squared();
        -0.5 * (self.comp.dim() as f64 * LN_2PI - self.logdet_p + quad)
    }
}

/// Shared mixture interface: per-component log-densities (excluding weights)
/// over a data batch. Implemented by both parameterizations so
/// responsibilities, total log-likelihood, and scoring use one codepath.
pub trait MixtureDensity {
    fn n_components(&self) -> usize;
    fn dim(&self) -> usize;
    fn component_weights(&self) -> Vec<f64>;
    /// N x K matrix of per-component log-densities `l_k(x_i)`.
    fn log_density_matrix(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

fn check_data_dim<T: MixtureDensity + ?Sized>(model: &T, data: &DMatrix<f64>) -> Result<()> {
    if data.ncols() != model.dim() {
        return Err(MfaError::DimensionMismatch {
            expected: model.dim(),
            got: data.ncols(),
            context: "data dimension",
        });
    }
    Ok(())
}

impl MixtureDensity for MfaModel {
    fn n_components(&self) -> usize {
        self.k()
    }

    fn dim(&self) -> usize {
        self.d()
    }

    fn component_weights(&self) -> Vec<f64> {
        self.weights()
    }

    fn log_density_matrix(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_data_dim(self, data)?;
        let n = data.nrows();
        let mut out = DMatrix::zeros(n, self.k());
        for (k, comp) in self.components.iter().enumerate() {
            let eval = CovarianceEvaluator::new(comp)?;
            for i in 0..n {
                let x = DVector::from_fn(self.d(), |j, _| data[(i, j)]);
                out[(i, k)] = eval.log_density(&x);
            }
        }
        Ok(out)
    }
}

impl MixtureDensity for PrecisionModel {
    fn n_components(&self) -> usize {
        self.k()
    }

    fn dim(&self) -> usize {
        self.d()
    }

    fn component_weights(&self) -> Vec<f64> {
        self.weights()
    }

    fn log_density_matrix(&self, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_data_dim(self, data)?;
        let n = data.nrows();
        let mut out = DMatrix::zeros(n, self.k());
        for (k, comp) in self.components.iter().enumerate() {
            let eval = PrecisionEvaluator::new(comp, k)?;
            for i in 0..n {
                let x = DVector::from_fn(self.d(), |j, _| data[(i, j)]);
                out[(i, k)] = eval.log_density(&x);
            }
        }
        Ok(out)
    }
}

/// N x K matrix of weighted scores `ln pi_k + l_k(x_i)`.
pub(crate) fn weighted_score_matrix<T: MixtureDensity + ?Sized>(
    model: &T,
    data: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let mut scores = model.log_density_matrix(data)?;
    let log_weights: Vec<f64> = model.component_weights().iter().map(|w| w.ln()).collect();
    for i in 0..scores.nrows() {
        for k in 0..scores.ncols() {
            scores[(i, k)] += log_weights[k];
        }
    }
    Ok(scores)
}

/// Row-wise softmax of a matrix of log scores. Errors when a row has zero
/// total mass (every entry negative infinity).
pub(crate) fn softmax_rows(scores: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, k) = (scores.nrows(), scores.ncols());
    let mut out = DMatrix::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            row[j] = scores[(i, j)];
        }
        let lse = logsumexp(&row)?;
        if lse == f64::NEG_INFINITY {
            return Err(MfaError::DegeneratePoint { row: i });
        }
        for j in 0..k {
            out[(i, j)] = (row[j] - lse).exp();
        }
    }
    Ok(out)
}

/// Posterior component responsibilities, computed in log space.
pub fn responsibilities<T: MixtureDensity + ?Sized>(
    model: &T,
    data: &DMatrix<f64>,
) -> Result<Responsibilities> {
    let scores = weighted_score_matrix(model, data)?;
    Ok(Responsibilities {
        entries: softmax_rows(&scores)?,
    })
}

/// Per-sample mixture log-likelihoods `log sum_k pi_k p_k(x_i)`.
pub fn per_sample_loglik<T: MixtureDensity + ?Sized>(
    model: &T,
    data: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    let scores = weighted_score_matrix(model, data)?;
    let k = scores.ncols();
    let mut row = vec![0.0; k];
    let mut out = Vec::with_capacity(scores.nrows());
    for i in 0..scores.nrows() {
        for j in 0..k {
            row[j] = scores[(i, j)];
        }
        let lse = logsumexp(&row)?;
        if lse == f64::NEG_INFINITY {
            return Err(MfaError::DegeneratePoint { row: i });
        }
        out.push(lse);
    }
    Ok(out)
}

/// Total data log-likelihood; zero for an empty batch.
pub fn total_loglik<T: MixtureDensity + ?Sized>(model: &T, data: &DMatrix<f64>) -> Result<f64> {
    Ok(per_sample_loglik(model, data)?.iter().sum())
}

/// Recovers generative parameters from a precision component:
/// `noise = E^{-1}` (floored) and `loading = E^{-1} Gamma Q M_eig^{-1/2}`
/// with `Q`, `M_eig` the eigenvectors/eigenvalues of `M_k`. The trailing
/// orthogonal factor of the matrix square root is dropped; it rotates the
/// latent vector, whose distribution is rotation-invariant.
pub fn precision_to_generative(comp: &PrecisionComponent) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let small = comp.small_m();
    let eig = sym_eig_small(&small)?;
    for &ev in eig.eigenvalues.iter() {
        if ev <= 0.0 {
            return Err(MfaError::IndefinitePrecision {
                component: 0,
                eigenvalue: ev,
            });
        }
    }
    let prec_diag = comp.prec_diag();
    let noise = prec_diag.map(|e| (1.0 / e).max(PSI_FLOOR));

    let d = comp.dim();
    let m = comp.latent_dim();
    let mut scaled = comp.prec_loading.clone();
    for i in 0..d {
        let inv_e = 1.0 / prec_diag[i];
        for j in 0..m {
            scaled[(i, j)] *= inv_e;
        }
    }
    let mut loading = scaled * &eig.eigenvectors;
    for j in 0..m {
        let inv_root = 1.0 / eig.eigenvalues[j].sqrt();
        for i in 0..d {
            loading[(i, j)] *= inv_root;
        }
    }
    Ok((noise, loading))
}

/// Draws `n` samples from the generative model. Each sample picks a component
/// from the mixture weights, then applies `mu + loading z + eps` with
/// `z ~ N(0, I_M)` and `eps ~ N(0, diag(noise))`. Returns the samples as rows
/// together with the generating component labels. Deterministic given `seed`.
pub fn sample(model: &MfaModel, n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    sample_inner(model, n, seed, None)
}

/// Like [`sample`] but always draws from component `k`.
pub fn sample_from_component(
    model: &MfaModel,
    k: usize,
    n: usize,
    seed: u64,
) -> (DMatrix<f64>, Vec<usize>) {
    sample_inner(model, n, seed, Some(k))
}

fn sample_inner(
    model: &MfaModel,
    n: usize,
    seed: u64,
    force_component: Option<usize>,
) -> (DMatrix<f64>, Vec<usize>) {
    let d = model.d();
    let m = model.m();
    let weights = model.weights();
    let mut rng = CounterRng::new(seed);
    let mut data = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = force_component.unwrap_or_else(|| rng.weighted_index(&weights));
        let comp = &model.components[k];
        let z = DVector::from_fn(m, |_, _| rng.normal());
        let mut x = &comp.mean + &comp.loading * z;
        for j in 0..d {
            x[j] += comp.noise[j].sqrt() * rng.normal();
        }
        for j in 0..d {
            data[(i, j)] = x[j];
        }
        labels.push(k);
    }
    (data, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn standard_component(d: usize, m: usize) -> MfaComponent {
        MfaComponent::new(
            1.0,
            DVector::zeros(d),
            DMatrix::zeros(d, m),
            DVector::from_element(d, 1.0),
        )
        .unwrap()
    }

    fn random_cov_component(rng: &mut CounterRng, weight: f64, d: usize, m: usize) -> MfaComponent {
        MfaComponent::new(
            weight,
            DVector::from_fn(d, |_, _| rng.normal()),
            DMatrix::from_fn(d, m, |_, _| rng.normal() * 0.7),
            DVector::from_fn(d, |_, _| 0.3 + rng.next_f64()),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_at_mean() {
        let comp = standard_component(1, 1);
        let ll = component_loglik(&comp, &DVector::zeros(1)).unwrap();
        assert_relative_eq!(ll, -0.5 * LN_2PI, epsilon = 1e-12);
        assert_relative_eq!(ll, -0.9189385332046727, epsilon = 1e-12);
    }

    #[test]
    fn loglik_at_mean_has_zero_mahalanobis() {
        let mut rng = CounterRng::new(5);
        let comp = random_cov_component(&mut rng, 1.0, 4, 2);
        let ll = component_loglik(&comp, &comp.mean.clone()).unwrap();
        let logdet = lowrank_logdet(&comp.loading, &comp.noise).unwrap();
        assert_relative_eq!(ll, -0.5 * (4.0 * LN_2PI + logdet), epsilon = 1e-12);
    }

    #[test]
    fn loglik_matches_dense_oracle() {
        // Dense multivariate-normal oracle: explicit Sigma, Gauss-Jordan
        // inverse, LU log-determinant.
        let mut rng = CounterRng::new(6);
        let comp = random_cov_component(&mut rng, 1.0, 6, 2);
        let x = DVector::from_fn(6, |_, _| rng.normal());

        let mut sigma = &comp.loading * comp.loading.transpose();
        for i in 0..6 {
            sigma[(i, i)] += comp.noise[i];
        }
        let inv = sigma.clone().try_inverse().unwrap();
        let logdet = sigma.determinant().ln();
        let c = &x - &comp.mean;
        let expected = -0.5 * (6.0 * LN_2PI + logdet + (c.transpose() * inv * &c)[(0, 0)]);
        let got = component_loglik(&comp, &x).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-10);
    }

    #[test]
    fn precision_standard_normal() {
        let comp = PrecisionComponent::new(
            1.0,
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
            DMatrix::zeros(3, 1),
        )
        .unwrap();
        let ll = precision_loglik(&comp, &DVector::zeros(3)).unwrap();
        assert_relative_eq!(ll, -1.5 * LN_2PI, epsilon = 1e-12);
    }

    #[test]
    fn precision_indefinite_m_rejected() {
        // Gamma first column (2, 0)^T with E = I gives M_11 = -3.
        let comp = PrecisionComponent::new(
            1.0,
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
            DMatrix::from_column_slice(2, 1, &[2.0, 0.0]),
        )
        .unwrap();
        match precision_loglik(&comp, &DVector::zeros(2)) {
            Err(MfaError::IndefinitePrecision { eigenvalue, .. }) => {
                assert_relative_eq!(eigenvalue, -3.0, epsilon = 1e-12);
            }
            other => panic!("expected indefinite-precision error, got {other:?}"),
        }
    }

    fn random_precision_component(
        rng: &mut CounterRng,
        weight: f64,
        d: usize,
        m: usize,
    ) -> PrecisionComponent {
        // Keep Gamma small relative to E so M stays positive-definite.
        let sqrt_prec = DVector::from_fn(d, |_, _| 0.8 + rng.next_f64());
        let scale = 0.3 / (m.max(1) as f64).sqrt();
        let prec_loading = DMatrix::from_fn(d, m, |_, _| rng.normal() * scale);
        PrecisionComponent::new(weight, DVector::from_fn(d, |_, _| rng.normal()), sqrt_prec, prec_loading)
            .unwrap()
    }

    #[test]
    fn precision_equals_converted_covariance_loglik() {
        let mut rng = CounterRng::new(31);
        for _ in 0..25 {
            let d = 2 + rng.below(10);
            let m = rng.below(4.min(d));
            let comp = random_precision_component(&mut rng, 1.0, d, m);
            let (noise, loading) = precision_to_generative(&comp).unwrap();
            let cov = MfaComponent::new(1.0, comp.mean.clone(), loading, noise).unwrap();
            let x = DVector::from_fn(d, |_, _| rng.normal());
            let a = precision_loglik(&comp, &x).unwrap();
            let b = component_loglik(&cov, &x).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn conversion_diagonal_precision() {
        let comp = PrecisionComponent::new(
            1.0,
            DVector::zeros(2),
            DVector::from_vec(vec![2.0, 0.5]),
            DMatrix::zeros(2, 1),
        )
        .unwrap();
        let (noise, loading) = precision_to_generative(&comp).unwrap();
        assert_eq!(loading, DMatrix::zeros(2, 1));
        assert_relative_eq!(noise[0], 0.25);
        assert_relative_eq!(noise[1], 4.0);
    }

    #[test]
    fn conversion_worked_example() {
        // E = I, Gamma = (0.5, 0)^T: M = 0.75, Lambda = Gamma / sqrt(0.75),
        // D + Lambda Lambda^T = diag(4/3, 1) = P^{-1}.
        let comp = PrecisionComponent::new(
            1.0,
            DVector::zeros(2),
            DVector::from_element(2, 1.0),
            DMatrix::from_column_slice(2, 1, &[0.5, 0.0]),
        )
        .unwrap();
        let (noise, loading) = precision_to_generative(&comp).unwrap();
        assert_relative_eq!(loading[(0, 0)], 0.5 / 0.75f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(loading[(1, 0)], 0.0);
        let sigma00 = noise[0] + loading[(0, 0)] * loading[(0, 0)];
        assert_relative_eq!(sigma00, 4.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(noise[1], 1.0);
    }

    #[test]
    fn conversion_reconstructs_dense_inverse() {
        let mut rng = CounterRng::new(37);
        for _ in 0..20 {
            let d = 2 + rng.below(8);
            let m = 1 + rng.below(3.min(d));
            let comp = random_precision_component(&mut rng, 1.0, d, m);
            let (noise, loading) = precision_to_generative(&comp).unwrap();

            let mut p = DMatrix::zeros(d, d);
            for i in 0..d {
                p[(i, i)] = comp.sqrt_prec[i] * comp.sqrt_prec[i];
            }
            p -= &comp.prec_loading * comp.prec_loading.transpose();
            let sigma_expected = p.try_inverse().unwrap();

            let mut sigma = &loading * loading.transpose();
            for i in 0..d {
                sigma[(i, i)] += noise[i];
            }
            for i in 0..d {
                for j in 0..d {
                    assert_relative_eq!(
                        sigma[(i, j)],
                        sigma_expected[(i, j)],
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn responsibilities_symmetric_components() {
        let comp = standard_component(2, 1);
        let mut a = comp.clone();
        a.weight = 0.5;
        let mut b = comp;
        b.weight = 0.5;
        let model = MfaModel::new(vec![a, b], PsiMode::Free).unwrap();
        let data = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, -1.0, 2.0, 0.5]);
        let resp = responsibilities(&model, &data).unwrap();
        for i in 0..3 {
            assert_relative_eq!(resp.entries[(i, 0)], 0.5, epsilon = 1e-14);
            assert_relative_eq!(resp.entries[(i, 1)], 0.5, epsilon = 1e-14);
        }
    }

    #[test]
    fn responsibilities_degenerate_prior() {
        let mut a = standard_component(2, 1);
        a.weight = 1.0;
        let mut b = standard_component(2, 1);
        b.weight = 0.0;
        b.mean = DVector::from_vec(vec![5.0, 5.0]);
        let model = MfaModel::new(vec![a, b], PsiMode::Free).unwrap();
        let data = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 5.0, 5.0]);
        let resp = responsibilities(&model, &data).unwrap();
        for i in 0..2 {
            assert_eq!(resp.entries[(i, 0)], 1.0);
            assert_eq!(resp.entries[(i, 1)], 0.0);
        }
    }

    #[test]
    fn responsibilities_match_direct_density_ratio() {
        let mut rng = CounterRng::new(41);
        let comps: Vec<MfaComponent> = [0.5, 0.3, 0.2]
            .iter()
            .map(|&w| random_cov_component(&mut rng, w, 4, 2))
            .collect();
        let model = MfaModel::new(comps, PsiMode::Free).unwrap();
        let data = DMatrix::from_fn(20, 4, |_, _| rng.normal() * 2.0);
        let resp = responsibilities(&model, &data).unwrap();

        for i in 0..20 {
            let x = DVector::from_fn(4, |j, _| data[(i, j)]);
            let dens: Vec<f64> = model
                .components
                .iter()
                .map(|c| c.weight * component_loglik(c, &x).unwrap().exp())
                .collect();
            let total: f64 = dens.iter().sum();
            let mut row_sum = 0.0;
            for k in 0..3 {
                assert_relative_eq!(resp.entries[(i, k)], dens[k] / total, epsilon = 1e-12);
                row_sum += resp.entries[(i, k)];
            }
            assert_relative_eq!(row_sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_loglik_single_component_sums_pointwise() {
        let mut rng = CounterRng::new(43);
        let comp = random_cov_component(&mut rng, 1.0, 3, 1);
        let model = MfaModel::new(vec![comp.clone()], PsiMode::Free).unwrap();
        let data = DMatrix::from_fn(10, 3, |_, _| rng.normal());
        let expected: f64 = (0..10)
            .map(|i| {
                let x = DVector::from_fn(3, |j, _| data[(i, j)]);
                component_loglik(&comp, &x).unwrap()
            })
            .sum();
        assert_relative_eq!(total_loglik(&model, &data).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn total_loglik_empty_batch_is_zero() {
        let model =
            MfaModel::new(vec![standard_component(2, 1)], PsiMode::Free).unwrap();
        let data = DMatrix::zeros(0, 2);
        assert_eq!(total_loglik(&model, &data).unwrap(), 0.0);
    }

    #[test]
    fn total_loglik_separated_components_direct_sum() {
        // Two unit-variance components far apart, one point at each mean:
        // each term is ln pi_k - D/2 ln 2pi up to an exponentially small
        // cross-component contribution.
        let d = 3;
        let mut a = standard_component(d, 0);
        a.weight = 0.4;
        let mut b = standard_component(d, 0);
        b.weight = 0.6;
        b.mean = DVector::from_element(d, 50.0);
        let model = MfaModel::new(vec![a, b], PsiMode::Free).unwrap();
        let mut data = DMatrix::zeros(2, d);
        for j in 0..d {
            data[(1, j)] = 50.0;
        }
        let expected = (0.4f64.ln() - 1.5 * LN_2PI) + (0.6f64.ln() - 1.5 * LN_2PI);
        assert_relative_eq!(total_loglik(&model, &data).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn small_m_is_symmetric() {
        let mut rng = CounterRng::new(47);
        for _ in 0..50 {
            let d = 2 + rng.below(8);
            let m = 1 + rng.below(4.min(d));
            let comp = PrecisionComponent::new(
                1.0,
                DVector::zeros(d),
                DVector::from_fn(d, |_, _| 0.5 + rng.next_f64() * 3.0),
                DMatrix::from_fn(d, m, |_, _| rng.normal()),
            )
            .unwrap();
            let small = comp.small_m();
            for i in 0..m {
                for j in 0..m {
                    assert_eq!(small[(i, j)], small[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = CounterRng::new(53);
        let scores = DMatrix::from_fn(8, 3, |_, _| rng.normal() * 10.0);
        let base = softmax_rows(&scores).unwrap();
        let shifted = softmax_rows(&scores.map(|v| v + 123.456)).unwrap();
        for i in 0..8 {
            for j in 0..3 {
                assert_relative_eq!(base[(i, j)], shifted[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn sample_vanishing_noise_concentrates_at_mean() {
        let comp = MfaComponent::new(
            1.0,
            DVector::from_vec(vec![5.0]),
            DMatrix::zeros(1, 1),
            DVector::from_vec(vec![1e-12]),
        )
        .unwrap();
        let model = MfaModel::new(vec![comp], PsiMode::Free).unwrap();
        let (data, labels) = sample(&model, 100, 99);
        for i in 0..100 {
            assert!((data[(i, 0)] - 5.0).abs() < 1e-5);
            assert_eq!(labels[i], 0);
        }
    }

    #[test]
    fn sample_deterministic_for_seed() {
        let mut rng = CounterRng::new(59);
        let comps = vec![
            random_cov_component(&mut rng, 0.3, 3, 1),
            random_cov_component(&mut rng, 0.7, 3, 1),
        ];
        let model = MfaModel::new(comps, PsiMode::Free).unwrap();
        let (a, la) = sample(&model, 25, 1234);
        let (b, lb) = sample(&model, 25, 1234);
        assert_eq!(la, lb);
        for i in 0..25 {
            for j in 0..3 {
                assert_eq!(a[(i, j)].to_bits(), b[(i, j)].to_bits());
            }
        }
    }

    #[test]
    fn sample_label_frequencies_follow_weights() {
        // Chi-square goodness of fit on K = 4 labels, 100000 draws;
        // critical value for 3 degrees of freedom at p = 0.01 is 11.345.
        let mut rng = CounterRng::new(61);
        let weights = [0.1, 0.2, 0.3, 0.4];
        let comps: Vec<MfaComponent> = weights
            .iter()
            .map(|&w| random_cov_component(&mut rng, w, 2, 1))
            .collect();
        let model = MfaModel::new(comps, PsiMode::Free).unwrap();
        let (_, labels) = sample(&model, 100_000, 7);
        let mut counts = [0usize; 4];
        for &l in &labels {
            counts[l] += 1;
        }
        let mut chi2 = 0.0;
        for k in 0..4 {
            let expected = weights[k] * 100_000.0;
            let diff = counts[k] as f64 - expected;
            chi2 += diff * diff / expected;
        }
        assert!(chi2 < 11.345, "chi-square statistic {chi2}");
    }

    #[test]
    fn tied_mode_requires_equal_noise() {
        let mut a = standard_component(2, 1);
        a.weight = 0.5;
        let mut b = standard_component(2, 1);
        b.weight = 0.5;
        b.noise = DVector::from_vec(vec![1.0, 2.0]);
        assert!(MfaModel::new(vec![a, b], PsiMode::Tied).is_err());
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut a = standard_component(2, 1);
        a.weight = 0.5;
        let mut b = standard_component(2, 1);
        b.weight = 0.4;
        assert!(matches!(
            MfaModel::new(vec![a, b], PsiMode::Free),
            Err(MfaError::InvalidModel(_))
        ));
    }
}
