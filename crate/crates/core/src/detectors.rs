//! Per-sample anomaly scoring: k-dist, SLOF, LID, DAO and the iForest tag.
//!
//! Every detector emits a finite score with the same orientation: higher
//! means more likely backdoor. k-dist is the raw distance to the k-th
//! nearest neighbor. SLOF is the mean ratio of the query's kdist to its
//! neighbors' kdists. LID is the maximum-likelihood estimate of local
//! intrinsic dimensionality over the k-NN radii. DAO raises each SLOF
//! density ratio to the neighbor's estimated LID.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::knn::NeighborSet;

/// Ceiling applied to each DAO summand so enormous density ratios raised to
/// large LIDs stay finite.
pub const DAO_TERM_CEILING: f64 = 1e300;

/// Which detector produced a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    KDist,
    Slof,
    Lid,
    Dao,
    IForest,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] = [
        DetectorKind::KDist,
        DetectorKind::Slof,
        DetectorKind::Lid,
        DetectorKind::Dao,
        DetectorKind::IForest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::KDist => "kdist",
            DetectorKind::Slof => "slof",
            DetectorKind::Lid => "lid",
            DetectorKind::Dao => "dao",
            DetectorKind::IForest => "iforest",
        }
    }

    /// Tag byte used by the `SCR1` score file format.
    pub fn tag(self) -> u8 {
        match self {
            DetectorKind::KDist => 0,
            DetectorKind::Slof => 1,
            DetectorKind::Lid => 2,
            DetectorKind::Dao => 3,
            DetectorKind::IForest => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => DetectorKind::KDist,
            1 => DetectorKind::Slof,
            2 => DetectorKind::Lid,
            3 => DetectorKind::Dao,
            4 => DetectorKind::IForest,
            other => return Err(Error::InvalidDetectorTag(other)),
        })
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "kdist" => DetectorKind::KDist,
            "slof" => DetectorKind::Slof,
            "lid" => DetectorKind::Lid,
            "dao" => DetectorKind::Dao,
            "iforest" => DetectorKind::IForest,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown detector {other:?}, expected kdist|slof|lid|dao|iforest"
                )))
            }
        })
    }
}

/// Normalizer of the LID-MLE log-sum. `K` divides by the neighbor count k;
/// `KMinusOne` divides by k-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LidDenominator {
    #[default]
    K,
    KMinusOne,
}

/// Knobs shared by all detectors. Defaults follow the reference setup:
/// locality k = 16 and 100 trees in the iForest ensemble.
#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// Locality parameter k.
    pub k: usize,
    /// Distance clamp floor applied before ratios and logs.
    pub epsilon: f64,
    /// Cap for LID estimates; the all-equal-radii degenerate case maps here.
    pub lid_cap: f64,
    pub lid_denominator: LidDenominator,
    /// iForest ensemble size.
    pub iforest_trees: usize,
    /// iForest per-tree subsample size; `None` means min(256, reference-set size).
    pub iforest_subsample: Option<usize>,
    /// RNG seed for iForest construction.
    pub seed: u64,
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind) -> Self {
        Self {
            kind,
            k: 16,
            epsilon: 1e-12,
            lid_cap: 1e6,
            lid_denominator: LidDenominator::K,
            iforest_trees: 100,
            iforest_subsample: None,
            seed: 0,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if matches!(self.kind, DetectorKind::Lid | DetectorKind::Dao) && self.k < 2 {
            return Err(Error::KTooSmall(self.k));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if !(self.lid_cap > 0.0) {
            return Err(Error::InvalidConfig("lid_cap must be positive".into()));
        }
        if self.iforest_trees < 1 {
            return Err(Error::InvalidConfig(
                "iforest_trees must be at least 1".into(),
            ));
        }
        if let Some(psi) = self.iforest_subsample {
            if psi < 2 {
                return Err(Error::InvalidConfig(
                    "iforest_subsample must be at least 2".into(),
                ));
            }
        }
        Ok(())
    }
}

/// k-dist score: the distance to the k-th nearest neighbor, used raw.
pub fn score_kdist(ns: &NeighborSet) -> f64 {
    ns.kdist()
}

/// MLE estimate of local intrinsic dimensionality from k-NN radii:
///
/// ```text
/// ID = -( (1/k) * sum_i ln(max(r_i, eps) / max(r_k, eps)) )^-1
/// ```
///
/// clamped to (0, lid_cap]. All radii equal (zero log-sum) maps to lid_cap,
/// encoding "maximally anomalous by LID" without infinities.
pub fn estimate_lid_mle(
    ns: &NeighborSet,
    epsilon: f64,
    lid_cap: f64,
    denominator: LidDenominator,
) -> Result<f64> {
    if ns.distances.len() < 2 {
        return Err(Error::KTooSmall(ns.distances.len()));
    }
    Ok(lid_mle_unchecked(
        &ns.distances,
        epsilon,
        lid_cap,
        denominator,
    ))
}

pub(crate) fn lid_mle_unchecked(
    radii: &[f64],
    epsilon: f64,
    lid_cap: f64,
    denominator: LidDenominator,
) -> f64 {
    let k = radii.len();
    let r_k = radii[k - 1].max(epsilon);
    let mut log_sum = 0.0;
    for &r in radii {
        log_sum += (r.max(epsilon) / r_k).ln();
    }
    let divisor = match denominator {
        LidDenominator::K => k as f64,
        LidDenominator::KMinusOne => (k - 1) as f64,
    };
    let mean = log_sum / divisor;
    if mean == 0.0 {
        return lid_cap;
    }
    (-1.0 / mean).min(lid_cap)
}

/// LID used directly as a detection score; higher means more anomalous.
pub fn score_lid(
    ns: &NeighborSet,
    epsilon: f64,
    lid_cap: f64,
    denominator: LidDenominator,
) -> Result<f64> {
    estimate_lid_mle(ns, epsilon, lid_cap, denominator)
}

/// Simplified local outlier factor: mean ratio of the query's kdist to each
/// neighbor's kdist, both clamped below by epsilon.
pub fn score_slof(query_ns: &NeighborSet, neighbor_kdists: &[f64], epsilon: f64) -> f64 {
    debug_assert_eq!(query_ns.indices.len(), neighbor_kdists.len());
    let num = query_ns.kdist().max(epsilon);
    let mut sum = 0.0;
    for &kd in neighbor_kdists {
        sum += num / kd.max(epsilon);
    }
    sum / neighbor_kdists.len() as f64
}

/// Dimensionality-aware outlier score: each density ratio is raised to the
/// neighbor's estimated LID. Ratios are clamped to [eps, 1/eps] before
/// exponentiation and each summand is capped at [`DAO_TERM_CEILING`].
///
/// With all neighbor LIDs equal to 1 this reduces exactly to SLOF.
pub fn score_dao(
    query_ns: &NeighborSet,
    neighbor_kdists: &[f64],
    neighbor_lids: &[f64],
    epsilon: f64,
) -> f64 {
    debug_assert_eq!(query_ns.indices.len(), neighbor_kdists.len());
    debug_assert_eq!(neighbor_kdists.len(), neighbor_lids.len());
    let num = query_ns.kdist().max(epsilon);
    let mut sum = 0.0;
    for (&kd, &lid) in neighbor_kdists.iter().zip(neighbor_lids) {
        let ratio = (num / kd.max(epsilon)).clamp(epsilon, 1.0 / epsilon);
        sum += ratio.powf(lid).min(DAO_TERM_CEILING);
    }
    sum / neighbor_kdists.len() as f64
}
