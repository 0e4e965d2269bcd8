//! Batch EM training in the covariance parameterization.
//!
//! Initialization runs k-means (k-means++ seeding, Lloyd iterations, empty
//! clusters reseeded to the farthest point) and fits a single-component PPCA
//! to each cluster in closed form. The fit loop then alternates the E-step
//! (posterior latent moments and responsibilities via the Woodbury identity)
//! with closed-form M-step updates under one of three noise modes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{MfaError, Result};
use crate::linalg::{solve_small, sym_eig_small};
use crate::model::{
    softmax_rows, CovarianceEvaluator, MfaComponent, MfaModel, PsiMode, Responsibilities,
    PSI_FLOOR,
};
use crate::rng::CounterRng;

/// Ridge added to a singular latent second-moment matrix in the M-step.
const MSTEP_RIDGE: f64 = 1e-10;

/// Configuration for [`fit_em`].
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Maximum number of M-step updates.
    pub max_iters: usize,
    /// Stop when the relative log-likelihood change drops below this.
    pub rel_tol: f64,
    pub psi_mode: PsiMode,
    /// Lloyd iterations for the k-means initializer.
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            rel_tol: 1e-6,
            psi_mode: PsiMode::Free,
            kmeans_iters: 25,
            seed: 0,
        }
    }
}

/// Per-iteration (or per-epoch) log-likelihood trace plus convergence
/// metadata, returned by both trainers.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub loglik_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
    pub wall_time: f64,
    /// Number of M-steps that needed a ridge on a singular latent
    /// second-moment system.
    pub regularization_events: usize,
}

/// Sufficient statistics for one component, accumulated over the batch.
#[derive(Debug, Clone)]
pub struct ComponentStats {
    /// Sum of responsibilities.
    pub resp_sum: f64,
    /// Posterior latent means, one column per data point (M x N, unweighted).
    pub latent_mean: DMatrix<f64>,
    /// Responsibility-weighted sum of posterior latent second moments (M x M).
    pub latent_second: DMatrix<f64>,
    /// Responsibility-weighted sum of (x_i - mu_k) <s>_i^T (D x M).
    pub cross: DMatrix<f64>,
    /// Responsibility-weighted sums of x and of x squared elementwise.
    pub weighted_x: DVector<f64>,
    pub weighted_xx: DVector<f64>,
    /// Responsibility-weighted sum of latent means (length M).
    pub latent_sum: DVector<f64>,
    /// Parameters the statistics were computed against; the mean update
    /// needs the old loading, the cross term is re-centered to the new mean.
    pub old_mean: DVector<f64>,
    pub old_loading: DMatrix<f64>,
}

/// E-step output for all components.
#[derive(Debug, Clone)]
pub struct EStepStats {
    pub components: Vec<ComponentStats>,
}

/// K-means with k-means++ seeding and Lloyd iterations. Empty clusters are
/// reseeded to the point farthest from its assigned center. Returns the
/// centers (K x D) and per-point assignments.
pub fn kmeans_init(
    x: &DMatrix<f64>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let n = x.nrows();
    let d = x.ncols();
    if k == 0 {
        return Err(MfaError::EmptyInput("kmeans: k must be at least 1"));
    }
    if n < k {
        return Err(MfaError::TooFewPoints { n, k });
    }
    let mut rng = CounterRng::new(seed);

    let sq_dist_to = |centers: &DMatrix<f64>, count: usize, i: usize| -> (usize, f64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..count {
            let mut s = 0.0;
            for j in 0..d {
                let diff = x[(i, j)] - centers[(c, j)];
                s += diff * diff;
            }
            if s < best_d {
                best_d = s;
                best = c;
            }
        }
        (best, best_d)
    };

    // k-means++ seeding.
    let mut centers = DMatrix::zeros(k, d);
    let first = rng.below(n);
    for j in 0..d {
        centers[(0, j)] = x[(first, j)];
    }
    let mut weights = vec![0.0; n];
    for c in 1..k {
        let mut total = 0.0;
        for i in 0..n {
            let (_, dist) = sq_dist_to(&centers, c, i);
            weights[i] = dist;
            total += dist;
        }
        let pick = if total > 0.0 {
            rng.weighted_index(&weights)
        } else {
            rng.below(n)
        };
        for j in 0..d {
            centers[(c, j)] = x[(pick, j)];
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..iters.max(1) {
        // Assignment step.
        let mut changed = false;
        for i in 0..n {
            let (best, _) = sq_dist_to(&centers, k, i);
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        // Reseed empty clusters to the farthest point.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0;
            let mut far_d = -1.0;
            for i in 0..n {
                let (_, dist) = sq_dist_to(&centers, k, i);
                if dist > far_d && counts[assignments[i]] > 1 {
                    far_d = dist;
                    far = i;
                }
            }
            for j in 0..d {
                centers[(c, j)] = x[(far, j)];
            }
            counts[assignments[far]] -= 1;
            assignments[far] = c;
            counts[c] = 1;
            changed = true;
        }
        // Update step.
        let mut sums: DMatrix<f64> = DMatrix::zeros(k, d);
        for i in 0..n {
            for j in 0..d {
                sums[(assignments[i], j)] += x[(i, j)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[(c, j)] = sums[(c, j)] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok((centers, assignments))
}

/// Total squared distance from each point to its assigned center.
pub fn kmeans_distortion(x: &DMatrix<f64>, centers: &DMatrix<f64>, assignments: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        for j in 0..x.ncols() {
            let diff = x[(i, j)] - centers[(a, j)];
            total += diff * diff;
        }
    }
    total
}

/// Closed-form maximum-likelihood PPCA on one cluster: the mean is the
/// cluster mean, the isotropic variance is the average of the D - M smallest
/// covariance eigenvalues (floored at `PSI_FLOOR`), and the loading columns
/// are the top-M eigenvectors scaled by `sqrt(max(eig - var, 0))`.
pub fn ppca_closed_form(
    x_cluster: &DMatrix<f64>,
    m: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let n = x_cluster.nrows();
    let d = x_cluster.ncols();
    if n < 2 {
        return Err(MfaError::ClusterTooSmall { size: n });
    }
    if m >= d {
        return Err(MfaError::InvalidModel(format!(
            "ppca latent dimension {m} must be below data dimension {d}"
        )));
    }
    let mean = DVector::from_fn(d, |j, _| x_cluster.column(j).sum() / n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let ca = x_cluster[(i, a)] - mean[a];
            for b in a..d {
                cov[(a, b)] += ca * (x_cluster[(i, b)] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / n as f64;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = sym_eig_small(&cov)?;
    let tail: f64 = (m..d).map(|i| eig.eigenvalues[i]).sum();
    let iso_var = (tail / (d - m) as f64).max(PSI_FLOOR);
    let mut loading = DMatrix::zeros(d, m);
    for j in 0..m {
        let scale = (eig.eigenvalues[j] - iso_var).max(0.0).sqrt();
        for i in 0..d {
            loading[(i, j)] = eig.eigenvectors[(i, j)] * scale;
        }
    }
    Ok((mean, loading, iso_var))
}

/// E-step: responsibilities, accumulated latent sufficient statistics, and
/// the current total log-likelihood.
///
/// Per component, `beta = Lambda^T Sigma^{-1}` comes from one M x M solve;
/// per point, `<s> = beta (x - mu)` and
/// `<s s^T> = I - beta Lambda + <s><s>^T`.
pub fn e_step(
    model: &MfaModel,
    x: &DMatrix<f64>,
) -> Result<(Responsibilities, EStepStats, f64)> {
    let (k, d, m) = model.dims();
    if x.ncols() != d {
        return Err(MfaError::DimensionMismatch {
            expected: d,
            got: x.ncols(),
            context: "e_step data dimension",
        });
    }
    let n = x.nrows();

    let mut scores = DMatrix::zeros(n, k);
    let mut latent_means: Vec<DMatrix<f64>> = Vec::with_capacity(k);
    let mut identity_minus_bl: Vec<DMatrix<f64>> = Vec::with_capacity(k);

    for (c, comp) in model.components.iter().enumerate() {
        let eval = CovarianceEvaluator::new(comp)?;
        let beta = eval.beta().clone();
        let mut imbl: DMatrix<f64> = DMatrix::identity(m, m);
        imbl -= &beta * &comp.loading;

        let log_weight = comp.weight.ln();
        let mut s_mat = DMatrix::zeros(m, n);
        let mut centered = DVector::zeros(d);
        for i in 0..n {
            for j in 0..d {
                centered[j] = x[(i, j)] - comp.mean[j];
            }
            scores[(i, c)] = log_weight + eval.log_density_centered(&centered);
            let s = &beta * &centered;
            for r in 0..m {
                s_mat[(r, i)] = s[r];
            }
        }
        latent_means.push(s_mat);
        identity_minus_bl.push(imbl);
    }

    let resp_entries = softmax_rows(&scores)?;
    let mut total = 0.0;
    {
        let mut row = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                row[c] = scores[(i, c)];
            }
            total += crate::linalg::logsumexp(&row)?;
        }
    }

    let mut components = Vec::with_capacity(k);
    for (c, comp) in model.components.iter().enumerate() {
        let s_mat = &latent_means[c];
        let mut resp_sum = 0.0;
        let mut latent_second = DMatrix::zeros(m, m);
        let mut cross = DMatrix::zeros(d, m);
        let mut weighted_x = DVector::zeros(d);
        let mut weighted_xx = DVector::zeros(d);
        let mut latent_sum = DVector::zeros(m);

        for i in 0..n {
            let g = resp_entries[(i, c)];
            resp_sum += g;
            for a in 0..m {
                let sa = s_mat[(a, i)];
                latent_sum[a] += g * sa;
                for b in 0..m {
                    latent_second[(a, b)] += g * sa * s_mat[(b, i)];
                }
            }
            for j in 0..d {
                let xv = x[(i, j)];
                weighted_x[j] += g * xv;
                weighted_xx[j] += g * xv * xv;
                let cj = xv - comp.mean[j];
                for a in 0..m {
                    cross[(j, a)] += g * cj * s_mat[(a, i)];
                }
            }
        }
        latent_second += &identity_minus_bl[c] * resp_sum;

        components.push(ComponentStats {
            resp_sum,
            latent_mean: s_mat.clone(),
            latent_second,
            cross,
            weighted_x,
            weighted_xx,
            latent_sum,
            old_mean: comp.mean.clone(),
            old_loading: comp.loading.clone(),
        });
    }

    Ok((
        Responsibilities {
            entries: resp_entries,
        },
        EStepStats { components },
        total,
    ))
}

/// M-step: closed-form updates in order mean, loading, noise, weight, then
/// the tied/isotropic noise pass. Returns the updated model and whether any
/// latent second-moment system needed a ridge.
pub fn m_step(
    x: &DMatrix<f64>,
    resp: &Responsibilities,
    stats: &EStepStats,
    psi_mode: PsiMode,
) -> Result<(MfaModel, bool)> {
    let n = x.nrows();
    let d = x.ncols();
    let k = stats.components.len();
    if resp.n() != n || resp.k() != k {
        return Err(MfaError::DimensionMismatch {
            expected: n,
            got: resp.n(),
            context: "m_step responsibilities",
        });
    }
    let mut regularized = false;

    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut loadings = Vec::with_capacity(k);
    let mut noises: Vec<DVector<f64>> = Vec::with_capacity(k);
    let mut resp_sums = Vec::with_capacity(k);

    for cs in &stats.components {
        let m = cs.old_loading.ncols();
        let r = cs.resp_sum;
        resp_sums.push(r);

        if r <= 1e-10 {
            // Dead component: keep its old parameters, weight renormalized below.
            weights.push(r);
            means.push(cs.old_mean.clone());
            loadings.push(cs.old_loading.clone());
            noises.push(DVector::from_element(d, PSI_FLOOR));
            continue;
        }

        // mu uses the old loading, per the alternating update order.
        let mean = (&cs.weighted_x - &cs.old_loading * &cs.latent_sum) / r;

        // Re-center the cross statistic from the old mean to the new one.
        let mut cross = cs.cross.clone();
        for j in 0..d {
            let shift = cs.old_mean[j] - mean[j];
            for a in 0..m {
                cross[(j, a)] += shift * cs.latent_sum[a];
            }
        }

        let loading = if m == 0 {
            DMatrix::zeros(d, 0)
        } else {
            match solve_small(&cs.latent_second, &cross.transpose()) {
                Ok(sol) => sol.transpose(),
                Err(MfaError::SingularMatrix { .. }) => {
                    regularized = true;
                    let mut ridged = cs.latent_second.clone();
                    for a in 0..m {
                        ridged[(a, a)] += MSTEP_RIDGE;
                    }
                    solve_small(&ridged, &cross.transpose())?.transpose()
                }
                Err(e) => return Err(e),
            }
        };

        let mut noise = DVector::zeros(d);
        for j in 0..d {
            let mut v = cs.weighted_xx[j] - 2.0 * mean[j] * cs.weighted_x[j]
                + r * mean[j] * mean[j];
            for a in 0..m {
                v -= loading[(j, a)] * cross[(j, a)];
            }
            noise[j] = (v / r).max(PSI_FLOOR);
        }

        weights.push(r);
        means.push(mean);
        loadings.push(loading);
        noises.push(noise);
    }

    // Normalize weights so they sum to one exactly up to rounding.
    let total_r: f64 = resp_sums.iter().sum();
    for w in weights.iter_mut() {
        *w /= total_r;
    }

    match psi_mode {
        PsiMode::Free => {}
        PsiMode::Tied => {
            let mut shared = DVector::zeros(d);
            for (c, noise) in noises.iter().enumerate() {
                shared += noise * resp_sums[c];
            }
            shared /= total_r;
            for noise in noises.iter_mut() {
                *noise = shared.clone();
            }
        }
        PsiMode::Isotropic => {
            for noise in noises.iter_mut() {
                let avg = noise.sum() / d as f64;
                *noise = DVector::from_element(d, avg);
            }
        }
    }

    let components = weights
        .into_iter()
        .zip(means)
        .zip(loadings)
        .zip(noises)
        .map(|(((w, mu), lam), psi)| MfaComponent::new(w, mu, lam, psi))
        .collect::<Result<Vec<_>>>()?;
    let model = MfaModel::new(components, psi_mode)?;
    Ok((model, regularized))
}

fn initial_model(
    x: &DMatrix<f64>,
    k: usize,
    m: usize,
    config: &EmConfig,
) -> Result<MfaModel> {
    let d = x.ncols();
    let (centers, assignments) = kmeans_init(x, k, config.kmeans_iters, config.seed)?;

    let mut cluster_rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        cluster_rows[a].push(i);
    }

    let gather = |rows: &[usize]| -> DMatrix<f64> {
        let mut sub = DMatrix::zeros(rows.len(), d);
        for (dst, &src) in rows.iter().enumerate() {
            for j in 0..d {
                sub[(dst, j)] = x[(src, j)];
            }
        }
        sub
    };

    let mut per_cluster = Vec::with_capacity(k);
    let mut fell_back = false;
    for rows in &cluster_rows {
        match ppca_closed_form(&gather(rows), m) {
            Ok(fit) => per_cluster.push(Some(fit)),
            Err(MfaError::ClusterTooSmall { .. }) => {
                fell_back = true;
                per_cluster.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    // Fallback: global PPCA shared by every component, with the k-means
    // centers serving as the perturbed means.
    let global = if fell_back {
        Some(ppca_closed_form(x, m)?)
    } else {
        None
    };

    let mut components = Vec::with_capacity(k);
    for c in 0..k {
        let frac = cluster_rows[c].len().max(1) as f64;
        let (mean, loading, iso_var) = match (&per_cluster[c], &global) {
            (Some((mean, loading, v)), _) => (mean.clone(), loading.clone(), *v),
            (None, Some((_, loading, v))) => {
                let center = DVector::from_fn(d, |j, _| centers[(c, j)]);
                (center, loading.clone(), *v)
            }
            (None, None) => unreachable!("fallback PPCA must exist"),
        };
        let noise = DVector::from_element(d, iso_var.max(PSI_FLOOR));
        components.push((frac, mean, loading, noise));
    }

    let total: f64 = components.iter().map(|(f, ..)| f).sum();

    // Tied mode needs identical noise from the start.
    let shared_noise = if config.psi_mode == PsiMode::Tied {
        let mut shared = DVector::zeros(d);
        for (f, _, _, noise) in &components {
            shared += noise * *f;
        }
        Some(shared / total)
    } else {
        None
    };

    let comps = components
        .into_iter()
        .map(|(f, mean, loading, noise)| {
            let noise = shared_noise.clone().unwrap_or(noise);
            MfaComponent::new(f / total, mean, loading, noise)
        })
        .collect::<Result<Vec<_>>>()?;
    MfaModel::new(comps, config.psi_mode)
}

/// Fits a mixture of factor analyzers by batch EM.
///
/// Initializes with k-means plus per-cluster PPCA, then alternates
/// [`e_step`] and [`m_step`] until the relative log-likelihood change drops
/// below `config.rel_tol` or `config.max_iters` M-steps have run. The trace
/// records the log-likelihood of the current model before each prospective
/// M-step, so the returned model always attains the final trace value.
pub fn fit_em(
    x: &DMatrix<f64>,
    k: usize,
    m: usize,
    config: &EmConfig,
) -> Result<(MfaModel, FitReport)> {
    let start = Instant::now();
    let n = x.nrows();
    let d = x.ncols();
    if n < k {
        return Err(MfaError::TooFewPoints { n, k });
    }
    if m >= d {
        return Err(MfaError::InvalidModel(format!(
            "latent dimension {m} must be below data dimension {d}"
        )));
    }

    let mut model = initial_model(x, k, m, config)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut regularization_events = 0;
    let mut msteps = 0;
    let mut prev_ll = f64::NEG_INFINITY;

    loop {
        let (resp, stats, ll) = e_step(&model, x)?;
        trace.push(ll);
        if trace.len() > 1 {
            let denom = ll.abs().max(f64::MIN_POSITIVE);
            if (ll - prev_ll).abs() / denom < config.rel_tol {
                converged = true;
                break;
            }
        }
        prev_ll = ll;
        if msteps == config.max_iters {
            break;
        }
        let (updated, regularized) = m_step(x, &resp, &stats, config.psi_mode)?;
        if regularized {
            regularization_events += 1;
        }
        model = updated;
        msteps += 1;
    }

    let report = FitReport {
        iterations_run: trace.len(),
        loglik_trace: trace,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
        regularization_events,
    };
    Ok((model, report))
}
