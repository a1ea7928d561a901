//! Turn scores into removal decisions and purified datasets.

use crate::error::{Error, Result};
use crate::store::{EmbeddingMatrix, LabelVector, ScoreVector};

/// How to pick which samples to remove.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterPolicy {
    /// Remove the ceil(fraction * n) highest-scoring samples, ties broken by
    /// lower index first. Fraction must lie in (0, 1).
    TopFraction(f64),
    /// Remove every sample with score >= threshold.
    AbsoluteThreshold(f64),
    /// Remove every sample with score >= mean + multiplier * std, statistics
    /// taken over all scores.
    MeanPlusStd(f64),
}

/// Indices selected for removal, ascending.
pub fn select_removals(scores: &ScoreVector, policy: &FilterPolicy) -> Result<Vec<usize>> {
    let n = scores.count();
    if n == 0 {
        return Err(Error::EmptyScores);
    }
    let values = scores.scores();
    let mut removed = match *policy {
        FilterPolicy::TopFraction(fraction) => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "top fraction must lie in (0, 1), got {fraction}"
                )));
            }
            let m = ((fraction * n as f64).ceil() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_unstable_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            order.truncate(m);
            order
        }
        FilterPolicy::AbsoluteThreshold(threshold) => (0..n)
            .filter(|&i| values[i] >= threshold)
            .collect(),
        FilterPolicy::MeanPlusStd(multiplier) => {
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let threshold = mean + multiplier * var.sqrt();
            (0..n).filter(|&i| values[i] >= threshold).collect()
        }
    };
    removed.sort_unstable();
    Ok(removed)
}

/// Complement of the removal set in ascending order.
pub fn purify_indices(count: usize, removals: &[usize]) -> Result<Vec<usize>> {
    let mut removed = vec![false; count];
    for &i in removals {
        if i >= count {
            return Err(Error::IndexOutOfRange { index: i, count });
        }
        removed[i] = true;
    }
    Ok((0..count).filter(|&i| !removed[i]).collect())
}

/// Copy the kept rows into a new matrix, original relative order, rows
/// bit-identical to the source.
pub fn purify_embeddings(m: &EmbeddingMatrix, kept: &[usize]) -> Result<EmbeddingMatrix> {
    if kept.is_empty() {
        return Err(Error::ZeroCount);
    }
    let mut data = Vec::with_capacity(kept.len() * m.dim());
    for &i in kept {
        if i >= m.count() {
            return Err(Error::IndexOutOfRange {
                index: i,
                count: m.count(),
            });
        }
        data.extend_from_slice(m.row(i));
    }
    Ok(EmbeddingMatrix::from_parts_unchecked(
        kept.len(),
        m.dim(),
        data,
        m.is_normalized(),
    ))
}

pub fn purify_labels(l: &LabelVector, kept: &[usize]) -> Result<LabelVector> {
    let mut flags = Vec::with_capacity(kept.len());
    for &i in kept {
        if i >= l.count() {
            return Err(Error::IndexOutOfRange {
                index: i,
                count: l.count(),
            });
        }
        flags.push(l.flags()[i]);
    }
    LabelVector::new(flags)
}
