//! Outlier scoring: per-sample mixture log-likelihoods and the ROC-AUC
//! metric over inlier/outlier score sets.

use nalgebra::DMatrix;

use crate::error::{MfaError, Result};
use crate::model::{per_sample_loglik, MixtureDensity};

/// Per-sample log-likelihoods split into inliers and outliers. Lower scores
/// are more outlying; a threshold on the score realizes a detector.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub inlier_scores: Vec<f64>,
    pub outlier_scores: Vec<f64>,
}

/// Per-sample mixture log-likelihood `log sum_k pi_k p_k(x_n)` for each row.
pub fn score_samples<T: MixtureDensity + ?Sized>(
    model: &T,
    data: &DMatrix<f64>,
) -> Result<Vec<f64>> {
    per_sample_loglik(model, data)
}

/// Area under the ROC curve via the rank-sum statistic: the probability that
/// a random inlier scores above a random outlier, with ties counted as 1/2.
/// Equivalent to trapezoidal integration of the ROC curve over all
/// thresholds.
pub fn roc_auc(scores: &ScoreSet) -> Result<f64> {
    let n_in = scores.inlier_scores.len();
    let n_out = scores.outlier_scores.len();
    if n_in == 0 {
        return Err(MfaError::EmptyInput("roc_auc inlier scores"));
    }
    if n_out == 0 {
        return Err(MfaError::EmptyInput("roc_auc outlier scores"));
    }

    // Combined ascending sort; average ranks across ties.
    let mut combined: Vec<(f64, bool)> = scores
        .inlier_scores
        .iter()
        .map(|&s| (s, true))
        .chain(scores.outlier_scores.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores must not be NaN"));

    let mut inlier_rank_sum = 0.0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j < combined.len() && combined[j].0 == combined[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j averaged over the tie group.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &combined[i..j] {
            if item.1 {
                inlier_rank_sum += avg_rank;
            }
        }
        i = j;
    }

    let n_in_f = n_in as f64;
    let n_out_f = n_out as f64;
    Ok((inlier_rank_sum - n_in_f * (n_in_f + 1.0) / 2.0) / (n_in_f * n_out_f))
}
