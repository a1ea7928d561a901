//! Batch-oriented detection of backdoor-poisoned samples in embedding
//! spaces.
//!
//! The engine scores every sample of a dataset with a local density-based
//! outlier detector (k-dist, SLOF, LID, DAO) or an isolation-forest
//! baseline, evaluates detection quality against ground-truth labels (AUC,
//! FPR@95), and filters the dataset by removing top-scoring rows. A
//! synthetic embedding generator reproduces the geometry that makes
//! poisoned samples stand out (a tight, isolated cluster far from the clean
//! data) so every detector property is testable at desk scale.
//!
//! Modules mirror the processing stages:
//!
//! * [`store`]: bit-exact binary formats for embeddings, labels and scores.
//! * [`knn`]: exact batched k-nearest-neighbor kernel.
//! * [`detectors`] / [`iforest`]: the five scoring functions.
//! * [`pipeline`]: batch planning and end-to-end dataset scoring.
//! * [`metrics`]: AUC, FPR at target TPR, threshold sweeps.
//! * [`filtering`]: removal policies and dataset purification.
//! * [`synth`]: seeded synthetic datasets and controlled experiments.

pub mod detectors;
pub mod error;
pub mod filtering;
pub mod iforest;
pub mod knn;
pub mod metrics;
pub mod pipeline;
pub mod store;
pub mod synth;

pub use detectors::{DetectorConfig, DetectorKind, LidDenominator};
pub use error::{Error, Result};
pub use knn::NeighborSet;
pub use metrics::EvalReport;
pub use pipeline::{BatchMode, BatchPlan, DatasetHandle};
pub use store::{EmbeddingMatrix, LabelVector, ScoreVector};
pub use synth::SyntheticConfig;

/// Mix a base seed with a stream index (batch, tree, sample or experiment
/// cell) into an independent child seed. SplitMix64 finalizer.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
