//! Accuracy of a fit against simulation truth.

use serde::{Deserialize, Serialize};

use crate::error::{BivasError, Result};

/// Area under the ROC curve in its Mann-Whitney form: the probability that a
/// random positive outscores a random negative, ties counting one half.
/// Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(BivasError::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(BivasError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// AUC of group inclusion probabilities against the true group indicators.
pub fn group_auc(pi_tilde: &[f64], eta: &[bool]) -> Result<f64> {
    auc(pi_tilde, eta)
}

/// Confusion counts and rates of a selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdrPower {
    pub fdr: f64,
    pub power: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub positives: usize,
}

/// Empirical FDR `FP / max(1, FP + TP)` and power `TP / positives`
/// (0 when there are no positives).
pub fn fdr_power(selected: &[usize], truth: &[bool]) -> Result<FdrPower> {
    if let Some(&bad) = selected.iter().find(|&&i| i >= truth.len()) {
        return Err(BivasError::DimensionMismatch(format!(
            "selected index {bad} out of range ({} entries)",
            truth.len()
        )));
    }
    let true_pos = selected.iter().filter(|&&i| truth[i]).count();
    let false_pos = selected.len() - true_pos;
    let positives = truth.iter().filter(|&&t| t).count();
    Ok(FdrPower {
        fdr: false_pos as f64 / (false_pos + true_pos).max(1) as f64,
        power: if positives == 0 {
            0.0
        } else {
            true_pos as f64 / positives as f64
        },
        true_pos,
        false_pos,
        positives,
    })
}

/// Mean squared difference between estimated and true coefficients.
pub fn coef_mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(BivasError::DimensionMismatch(format!(
            "{} estimates for {} coefficients",
            estimate.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let sse: f64 = estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum();
    Ok(sse / truth.len() as f64)
}

/// `1 - SSE / SST` of predictions.
pub fn r_squared(pred: &[f64], observed: &[f64]) -> f64 {
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let sst: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    let sse: f64 = pred.iter().zip(observed).map(|(p, y)| (y - p).powi(2)).sum();
    1.0 - sse / sst
}
