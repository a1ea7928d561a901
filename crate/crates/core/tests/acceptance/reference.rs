//! Naive double-precision reference implementations used as the independent
//! oracle for the acceptance suite.
//!
//! Everything here is written from the definitions, expressed the dumb way:
//! sequential distance sums, full sorts, direct formula evaluation and a
//! from-scratch isolation-forest builder. RNG stream conventions (ChaCha8
//! per-tree streams derived with a SplitMix64 step) are deliberately shared
//! with the engine so structural logic can be compared; all numerical and
//! structural work is re-derived independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One scored point set: rows in batch order, queries are the first
/// `n_queries` slots, every row excludes its own slot from its neighborhood.
pub struct RefBatch {
    pub rows: Vec<Vec<f32>>,
    pub n_queries: usize,
}

fn seq_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc.sqrt()
}

/// Sorted (distance, index) lists per row, own slot excluded, full sort,
/// ties by ascending index.
fn all_neighbors(batch: &RefBatch, k: usize) -> Vec<Vec<(f64, usize)>> {
    let n = batch.rows.len();
    (0..n)
        .map(|i| {
            let mut cands: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (seq_distance(&batch.rows[i], &batch.rows[j]), j))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.truncate(k);
            cands
        })
        .collect()
}

fn lid_from_radii(radii: &[f64], epsilon: f64, cap: f64) -> f64 {
    let k = radii.len() as f64;
    let r_k = radii.last().unwrap().max(epsilon);
    let mean = radii.iter().map(|r| (r.max(epsilon) / r_k).ln()).sum::<f64>() / k;
    if mean == 0.0 {
        cap
    } else {
        (-1.0 / mean).min(cap)
    }
}

pub const EPSILON: f64 = 1e-12;
pub const LID_CAP: f64 = 1e6;
const DAO_CEILING: f64 = 1e300;

pub fn kdist_scores(batch: &RefBatch, k: usize) -> Vec<f64> {
    let nbrs = all_neighbors(batch, k);
    (0..batch.n_queries).map(|q| nbrs[q][k - 1].0).collect()
}

pub fn lid_scores(batch: &RefBatch, k: usize) -> Vec<f64> {
    let nbrs = all_neighbors(batch, k);
    (0..batch.n_queries)
        .map(|q| {
            let radii: Vec<f64> = nbrs[q].iter().map(|c| c.0).collect();
            lid_from_radii(&radii, EPSILON, LID_CAP)
        })
        .collect()
}

pub fn slof_scores(batch: &RefBatch, k: usize) -> Vec<f64> {
    let nbrs = all_neighbors(batch, k);
    let kd: Vec<f64> = nbrs.iter().map(|c| c[k - 1].0).collect();
    (0..batch.n_queries)
        .map(|q| {
            let num = kd[q].max(EPSILON);
            let sum: f64 = nbrs[q].iter().map(|&(_, o)| num / kd[o].max(EPSILON)).sum();
            sum / k as f64
        })
        .collect()
}

pub fn dao_scores(batch: &RefBatch, k: usize) -> Vec<f64> {
    let nbrs = all_neighbors(batch, k);
    let kd: Vec<f64> = nbrs.iter().map(|c| c[k - 1].0).collect();
    let lids: Vec<f64> = nbrs
        .iter()
        .map(|c| {
            let radii: Vec<f64> = c.iter().map(|x| x.0).collect();
            lid_from_radii(&radii, EPSILON, LID_CAP)
        })
        .collect();
    (0..batch.n_queries)
        .map(|q| {
            let num = kd[q].max(EPSILON);
            let sum: f64 = nbrs[q]
                .iter()
                .map(|&(_, o)| {
                    let ratio = (num / kd[o].max(EPSILON)).clamp(EPSILON, 1.0 / EPSILON);
                    ratio.powf(lids[o]).min(DAO_CEILING)
                })
                .sum();
            sum / k as f64
        })
        .collect()
}

// same SplitMix64 convention the engine derives child seeds with
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GAMMA: f64 = 0.5772156649;

fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let nf = n as f64;
            2.0 * ((nf - 1.0).ln() + GAMMA) - 2.0 * (nf - 1.0) / nf
        }
    }
}

enum RefNode {
    Split {
        attr: usize,
        value: f64,
        left: Box<RefNode>,
        right: Box<RefNode>,
    },
    Leaf {
        size: usize,
    },
}

fn build_ref_node(
    rows: &[Vec<f32>],
    points: &[usize],
    depth: usize,
    limit: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> RefNode {
    if points.len() <= 1 || depth >= limit {
        return RefNode::Leaf { size: points.len() };
    }
    let mut chosen = None;
    for _ in 0..dim {
        let attr = rng.random_range(0..dim);
        let lo = points
            .iter()
            .map(|&p| rows[p][attr] as f64)
            .fold(f64::INFINITY, f64::min);
        let hi = points
            .iter()
            .map(|&p| rows[p][attr] as f64)
            .fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            chosen = Some((attr, lo, hi));
            break;
        }
    }
    let Some((attr, lo, hi)) = chosen else {
        return RefNode::Leaf { size: points.len() };
    };
    let value = rng.random_range(lo..hi);
    let left_pts: Vec<usize> = points
        .iter()
        .copied()
        .filter(|&p| (rows[p][attr] as f64) < value)
        .collect();
    let right_pts: Vec<usize> = points
        .iter()
        .copied()
        .filter(|&p| (rows[p][attr] as f64) >= value)
        .collect();
    let left = build_ref_node(rows, &left_pts, depth + 1, limit, dim, rng);
    let right = build_ref_node(rows, &right_pts, depth + 1, limit, dim, rng);
    RefNode::Split {
        attr,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}

fn path_length(node: &RefNode, query: &[f32], depth: f64) -> f64 {
    match node {
        RefNode::Leaf { size } => depth + c_factor(*size),
        RefNode::Split {
            attr,
            value,
            left,
            right,
        } => {
            if (query[*attr] as f64) < *value {
                path_length(left, query, depth + 1.0)
            } else {
                path_length(right, query, depth + 1.0)
            }
        }
    }
}

/// From-scratch isolation forest matching the documented construction: per
/// tree, a ChaCha8 stream seeded with derive_seed(forest_seed, tree); a
/// partial Fisher-Yates psi-subsample; up to dim attempts at a split
/// attribute with spread; a uniform split value in [lo, hi); left subtree
/// built before right; height limit ceil(log2 psi).
pub fn iforest_scores(batch: &RefBatch, trees: usize, forest_seed: u64) -> Vec<f64> {
    let rows = &batch.rows;
    let n = rows.len();
    let dim = rows[0].len();
    let psi = 256.min(n);
    let limit = (psi as f64).log2().ceil() as usize;
    let c_psi = c_factor(psi);

    let mut forest = Vec::with_capacity(trees);
    for t in 0..trees {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(forest_seed, t as u64));
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..psi {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        let sample: Vec<usize> = indices[..psi].to_vec();
        forest.push(build_ref_node(rows, &sample, 0, limit, dim, &mut rng));
    }

    (0..batch.n_queries)
        .map(|q| {
            let sum: f64 = forest.iter().map(|t| path_length(t, &rows[q], 0.0)).sum();
            let mean = sum / trees as f64;
            (-mean / c_psi).exp2()
        })
        .collect()
}

/// AUC by direct pairwise comparison, ties worth half.
pub fn pairwise_auc(scores: &[f64], flags: &[u8]) -> f64 {
    let mut won = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if flags[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if flags[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                won += 1.0;
            } else if si == sj {
                won += 0.5;
            }
        }
    }
    won / pairs
}

/// FPR at the target TPR by explicit threshold enumeration over the
/// observed scores (plus an above-max sentinel), rule score >= t.
pub fn enumerated_fpr_at_tpr(scores: &[f64], flags: &[u8], target: f64) -> f64 {
    let p = flags.iter().filter(|&&f| f == 1).count() as f64;
    let n_neg = flags.len() as f64 - p;
    let confusion = |t: f64| {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (i, &s) in scores.iter().enumerate() {
            if s >= t {
                if flags[i] == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        (tp / p, fp / n_neg)
    };
    if target == 0.0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    for &t in &thresholds {
        let (tpr, fpr) = confusion(t);
        if tpr >= target {
            return fpr;
        }
    }
    unreachable!("the smallest threshold reaches TPR 1")
}
