//! Isolation forest baseline.
//!
//! Axis-aligned randomized partition trees over a per-tree subsample of the
//! reference set. Construction is fully determined by the config seed:
//! tree t draws from its own ChaCha8 stream seeded with
//! `derive_seed(seed, t)`, consuming draws in a fixed order (subsample, then
//! per node: split attribute attempts, split value, left subtree, right
//! subtree).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::derive_seed;
use crate::detectors::DetectorConfig;
use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

/// Truncated Euler-Mascheroni constant used by the harmonic-number
/// approximation in the path-length normalizer.
pub const EULER_MASCHERONI: f64 = 0.5772156649;

/// Average path length c(n) of an unsuccessful BST search over n points:
/// c(1) = 0, c(2) = 1 and c(n) = 2 H(n-1) - 2 (n-1)/n with
/// H(m) = ln(m) + gamma for n > 2.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let nf = n as f64;
            2.0 * ((nf - 1.0).ln() + EULER_MASCHERONI) - 2.0 * (nf - 1.0) / nf
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        attr: u32,
        value: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        size: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn path_length(&self, query: &[f32]) -> f64 {
        let mut idx = 0usize;
        let mut depth = 0.0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { size } => return depth + average_path_length(*size as usize),
                Node::Split {
                    attr,
                    value,
                    left,
                    right,
                } => {
                    idx = if (query[*attr as usize] as f64) < *value {
                        *left as usize
                    } else {
                        *right as usize
                    };
                    depth += 1.0;
                }
            }
        }
    }

    fn height(&self) -> usize {
        fn depth_of(nodes: &[Node], idx: usize) -> usize {
            match &nodes[idx] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + depth_of(nodes, *left as usize).max(depth_of(nodes, *right as usize))
                }
            }
        }
        depth_of(&self.nodes, 0)
    }
}

/// A fitted ensemble of isolation trees.
#[derive(Debug, Clone, PartialEq)]
pub struct IsolationForest {
    trees: Vec<Tree>,
    psi: usize,
    c_psi: f64,
    dim: usize,
}

impl IsolationForest {
    pub fn psi(&self) -> usize {
        self.psi
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Maximum split depth across all trees (leaves are depth 0).
    pub fn max_height(&self) -> usize {
        self.trees.iter().map(Tree::height).max().unwrap_or(0)
    }

    /// Anomaly score in (0, 1): 2^(-E[h(query)] / c(psi)), higher is more
    /// anomalous. E[h] equals c(psi) maps to exactly 0.5.
    pub fn score(&self, query: &[f32]) -> Result<f64> {
        if query.len() != self.dim {
            return Err(Error::DimMismatch {
                left: query.len(),
                right: self.dim,
            });
        }
        let mut sum = 0.0;
        for tree in &self.trees {
            sum += tree.path_length(query);
        }
        let mean = sum / self.trees.len() as f64;
        Ok((-mean / self.c_psi).exp2())
    }
}

fn ceil_log2(n: usize) -> usize {
    debug_assert!(n >= 2);
    (usize::BITS - (n - 1).leading_zeros()) as usize
}

fn build_node(
    nodes: &mut Vec<Node>,
    refs: &EmbeddingMatrix,
    points: &mut [u32],
    depth: usize,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> u32 {
    if points.len() <= 1 || depth >= limit {
        nodes.push(Node::Leaf {
            size: points.len() as u32,
        });
        return (nodes.len() - 1) as u32;
    }

    // Up to dim attempts at an attribute with spread; identical points leaf out.
    let dim = refs.dim();
    let mut chosen: Option<(usize, f64, f64)> = None;
    for _ in 0..dim {
        let attr = rng.random_range(0..dim);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &p in points.iter() {
            let v = refs.row(p as usize)[attr] as f64;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            chosen = Some((attr, lo, hi));
            break;
        }
    }
    let Some((attr, lo, hi)) = chosen else {
        nodes.push(Node::Leaf {
            size: points.len() as u32,
        });
        return (nodes.len() - 1) as u32;
    };

    let value = rng.random_range(lo..hi);
    let mut mid = 0;
    for i in 0..points.len() {
        if (refs.row(points[i] as usize)[attr] as f64) < value {
            points.swap(mid, i);
            mid += 1;
        }
    }

    let here = nodes.len();
    nodes.push(Node::Leaf { size: 0 }); // placeholder
    let (left_pts, right_pts) = points.split_at_mut(mid);
    let left = build_node(nodes, refs, left_pts, depth + 1, limit, rng);
    let right = build_node(nodes, refs, right_pts, depth + 1, limit, rng);
    nodes[here] = Node::Split {
        attr: attr as u32,
        value,
        left,
        right,
    };
    here as u32
}

/// Fit an isolation forest on the reference block. Each tree draws a
/// psi-subsample without replacement (partial Fisher-Yates), then splits on
/// uniformly random attributes at uniformly random values between the
/// subsample's min and max, until isolation or height ceil(log2 psi).
pub fn iforest_fit(refs: &EmbeddingMatrix, cfg: &DetectorConfig) -> Result<IsolationForest> {
    cfg.validate()?;
    let n = refs.count();
    if n < 2 {
        return Err(Error::TooFewPoints(n));
    }
    let psi = cfg.iforest_subsample.unwrap_or(256).min(n);
    let limit = ceil_log2(psi);

    let mut indices: Vec<u32> = (0..n as u32).collect();
    let mut trees = Vec::with_capacity(cfg.iforest_trees);
    for t in 0..cfg.iforest_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t as u64));
        for (i, slot) in indices.iter_mut().enumerate() {
            *slot = i as u32;
        }
        for i in 0..psi {
            let j = rng.random_range(i..n);
            indices.swap(i, j);
        }
        let mut nodes = Vec::new();
        let (sample, _) = indices.split_at_mut(psi);
        build_node(&mut nodes, refs, sample, 0, limit, &mut rng);
        trees.push(Tree { nodes });
    }

    Ok(IsolationForest {
        trees,
        psi,
        c_psi: average_path_length(psi),
        dim: refs.dim(),
    })
}

/// Score a single query row against a fitted forest.
pub fn iforest_score(forest: &IsolationForest, query: &[f32]) -> Result<f64> {
    forest.score(query)
}
