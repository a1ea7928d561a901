//! Detection quality metrics: AUC, FPR at a target TPR, threshold sweeps.
//!
//! AUC is the Mann-Whitney rank statistic with average-rank tie handling,
//! i.e. the probability that a backdoor sample receives a higher score than
//! a clean sample (ties counted half). The detection predicate is
//! `score >= t` throughout, so every threshold is realizable at an observed
//! score value.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::store::{LabelVector, ScoreVector};

/// Evaluation summary, serialized as JSON with exactly these field names.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub auc: f64,
    pub fpr_at_95_tpr: f64,
    pub n_clean: usize,
    pub n_backdoor: usize,
    pub detector: String,
    pub wall_time_seconds: f64,
}

/// One entry of a threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// Removal fractions evaluated by default; includes the 1%, 5% and 10%
/// filtering rates.
pub const DEFAULT_SWEEP_GRID: [f64; 10] = [
    0.001, 0.005, 0.01, 0.02, 0.05, 0.10, 0.15, 0.20, 0.30, 0.50,
];

fn check_inputs(scores: &[f64], labels: &LabelVector) -> Result<(usize, usize)> {
    if scores.len() != labels.count() {
        return Err(Error::CountMismatch {
            left: scores.len(),
            right: labels.count(),
        });
    }
    for (i, v) in scores.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue { row: i, col: 0 });
        }
    }
    let positives = labels.n_backdoor();
    let negatives = labels.count() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels);
    }
    Ok((positives, negatives))
}

/// Area under the ROC curve via rank statistics:
/// (sum of positive ranks - P(P+1)/2) / (P * N), average ranks on ties.
pub fn auc(scores: &[f64], labels: &LabelVector) -> Result<f64> {
    let (p, n_neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the average
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j]
            .iter()
            .filter(|&&idx| labels.is_backdoor(idx))
            .count();
        rank_sum_pos += pos_in_group as f64 * avg_rank;
        i = j;
    }
    let p_f = p as f64;
    Ok((rank_sum_pos - p_f * (p_f + 1.0) / 2.0) / (p_f * n_neg as f64))
}

/// False positive rate at the largest threshold achieving
/// TPR >= `target_tpr` under the rule `score >= t`. At target 0 the
/// threshold sits above every observed score, so the FPR is 0.
pub fn fpr_at_tpr(scores: &[f64], labels: &LabelVector, target_tpr: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target_tpr) {
        return Err(Error::InvalidConfig(format!(
            "target_tpr must lie in [0, 1], got {target_tpr}"
        )));
    }
    let (p, n_neg) = check_inputs(scores, labels)?;
    if target_tpr == 0.0 {
        return Ok(0.0);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        // consume the whole tie group; `score >= t` includes all of it
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels.is_backdoor(order[j]) {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp as f64 / p as f64 >= target_tpr {
            return Ok(fp as f64 / n_neg as f64);
        }
        i = j;
    }
    unreachable!("TPR reaches 1.0 at the smallest observed score")
}

/// Evaluate TPR/FPR at the thresholds realizing the given removal
/// fractions: for fraction f the threshold is the ceil(f*n)-th largest
/// score, matching top-fraction filtering.
pub fn threshold_sweep(
    scores: &[f64],
    labels: &LabelVector,
    grid: &[f64],
) -> Result<Vec<SweepPoint>> {
    let (p, n_neg) = check_inputs(scores, labels)?;
    for &f in grid {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sweep fractions must lie in (0, 1), got {f}"
            )));
        }
    }
    let n = scores.len();
    let mut desc: Vec<f64> = scores.to_vec();
    desc.sort_unstable_by(|a, b| b.total_cmp(a));

    let mut out = Vec::with_capacity(grid.len());
    for &f in grid {
        let m = (f * n as f64).ceil() as usize;
        let m = m.clamp(1, n);
        let t = desc[m - 1];
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s >= t {
                if labels.is_backdoor(i) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        out.push(SweepPoint {
            threshold: t,
            tpr: tp as f64 / p as f64,
            fpr: fp as f64 / n_neg as f64,
        });
    }
    Ok(out)
}

/// Build a full evaluation report for a score vector.
///
/// `wall_time_seconds` is the runtime of the scoring pass that produced the
/// scores; callers evaluating from a score file pass 0 since the file format
/// does not record timing.
pub fn evaluate(
    scores: &ScoreVector,
    labels: &LabelVector,
    wall_time_seconds: f64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        auc: auc(scores.scores(), labels)?,
        fpr_at_95_tpr: fpr_at_tpr(scores.scores(), labels, 0.95)?,
        n_clean: labels.n_clean(),
        n_backdoor: labels.n_backdoor(),
        detector: scores.detector().name().to_string(),
        wall_time_seconds,
    })
}
