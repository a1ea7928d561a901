//! Batch planning and end-to-end dataset scoring.
//!
//! A dataset is scored batch by batch: each sample's image embedding is the
//! query, and the batch's image embeddings plus (when present) text
//! embeddings form the reference set for neighborhood selection. Text rows
//! are never queries; they only enrich the neighborhood density estimate.
//!
//! Two batching modes exist. `Partition` (the default) shuffles the dataset
//! once and scores each chunk against itself, which is what makes
//! million-scale runs affordable. `Resample` draws a fresh batch per sample
//! and is kept as a fidelity option.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::derive_seed;
use crate::detectors::{
    lid_mle_unchecked, score_dao, score_kdist, score_slof, DetectorConfig, DetectorKind,
};
use crate::error::{Error, Result};
use crate::iforest::iforest_fit;
use crate::knn::{knn_all_rows, knn_rows_within, NeighborSet};
use crate::store::{EmbeddingMatrix, LabelVector, ScoreVector};

/// Reference batch size for detection runs.
pub const DEFAULT_BATCH_SIZE: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// One shuffled pass, each sample scored against its own chunk.
    Partition,
    /// A fresh random batch per sample.
    Resample,
}

impl std::str::FromStr for BatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partition" => Ok(BatchMode::Partition),
            "resample" => Ok(BatchMode::Resample),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?}, expected partition|resample"
            ))),
        }
    }
}

impl std::fmt::Display for BatchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BatchMode::Partition => "partition",
            BatchMode::Resample => "resample",
        })
    }
}

/// Per-sample batch membership (Partition) or the seeded recipe for drawing
/// a batch per sample (Resample).
#[derive(Debug, Clone)]
pub struct BatchPlan {
    mode: BatchMode,
    batch_size: usize,
    seed: u64,
    n: usize,
    k: usize,
    batches: Vec<Vec<u32>>,
}

impl BatchPlan {
    pub fn mode(&self) -> BatchMode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Locality the plan was validated against (batch sizes stay >= k+1).
    pub fn k(&self) -> usize {
        self.k
    }

    /// Partition chunks; empty in Resample mode.
    pub fn batches(&self) -> &[Vec<u32>] {
        &self.batches
    }

    pub fn min_batch_len(&self) -> usize {
        match self.mode {
            BatchMode::Partition => self.batches.iter().map(Vec::len).min().unwrap_or(0),
            BatchMode::Resample => self.batch_size,
        }
    }

    /// Expand the Resample recipe for sample `i`: the sample itself at slot
    /// 0 followed by batch_size-1 distinct other indices.
    pub fn resample_members(&self, i: usize) -> Vec<u32> {
        debug_assert_eq!(self.mode, BatchMode::Resample);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, i as u64));
        let mut members = Vec::with_capacity(self.batch_size);
        members.push(i as u32);
        for p in rand::seq::index::sample(&mut rng, self.n - 1, self.batch_size - 1) {
            let j = if p >= i { p + 1 } else { p };
            members.push(j as u32);
        }
        members
    }
}

/// Plan batches for a dataset of `n` samples.
///
/// Partition mode shuffles 0..n with the seed and splits into consecutive
/// chunks of `batch_size`; a trailing chunk smaller than k+1 is merged into
/// the previous one so self-excluded k-NN stays well-defined everywhere.
pub fn plan_batches(
    n: usize,
    batch_size: usize,
    k: usize,
    seed: u64,
    mode: BatchMode,
) -> Result<BatchPlan> {
    if k < 1 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < k + 1 {
        return Err(Error::DatasetTooSmall { n, k });
    }
    if batch_size < k + 1 {
        return Err(Error::BatchTooSmall { batch_size, k });
    }
    let batch_size = batch_size.min(n);

    let batches = match mode {
        BatchMode::Partition => {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            let mut batches: Vec<Vec<u32>> = idx.chunks(batch_size).map(<[u32]>::to_vec).collect();
            if batches.len() > 1 && batches.last().unwrap().len() < k + 1 {
                let tail = batches.pop().unwrap();
                batches.last_mut().unwrap().extend(tail);
            }
            batches
        }
        BatchMode::Resample => Vec::new(),
    };

    Ok(BatchPlan {
        mode,
        batch_size,
        seed,
        n,
        k,
        batches,
    })
}

/// Borrowed view over one dataset: image embeddings, optional text
/// embeddings and optional ground-truth labels.
#[derive(Debug, Clone, Copy)]
pub struct DatasetHandle<'a> {
    pub images: &'a EmbeddingMatrix,
    pub texts: Option<&'a EmbeddingMatrix>,
    pub labels: Option<&'a LabelVector>,
}

impl<'a> DatasetHandle<'a> {
    pub fn new(
        images: &'a EmbeddingMatrix,
        texts: Option<&'a EmbeddingMatrix>,
        labels: Option<&'a LabelVector>,
    ) -> Result<Self> {
        let handle = Self {
            images,
            texts,
            labels,
        };
        handle.validate()?;
        Ok(handle)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.texts {
            if t.count() != self.images.count() {
                return Err(Error::CountMismatch {
                    left: t.count(),
                    right: self.images.count(),
                });
            }
            if t.dim() != self.images.dim() {
                return Err(Error::DimMismatch {
                    left: self.images.dim(),
                    right: t.dim(),
                });
            }
        }
        if let Some(l) = self.labels {
            if l.count() != self.images.count() {
                return Err(Error::CountMismatch {
                    left: l.count(),
                    right: self.images.count(),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.images.count()
    }
}

/// Concatenate a batch's image rows with its text rows into one reference
/// block. Query i (an image row) maps to reference slot i, which is the slot
/// masked by self-exclusion.
pub fn build_reference_set(
    batch_images: &EmbeddingMatrix,
    batch_texts: Option<&EmbeddingMatrix>,
) -> Result<EmbeddingMatrix> {
    let Some(texts) = batch_texts else {
        return Ok(batch_images.clone());
    };
    if texts.dim() != batch_images.dim() {
        return Err(Error::DimMismatch {
            left: batch_images.dim(),
            right: texts.dim(),
        });
    }
    if texts.count() != batch_images.count() {
        return Err(Error::CountMismatch {
            left: batch_images.count(),
            right: texts.count(),
        });
    }
    let mut data = Vec::with_capacity((batch_images.count() + texts.count()) * batch_images.dim());
    data.extend_from_slice(batch_images.data());
    data.extend_from_slice(texts.data());
    Ok(EmbeddingMatrix::from_parts_unchecked(
        batch_images.count() + texts.count(),
        batch_images.dim(),
        data,
        batch_images.is_normalized() && texts.is_normalized(),
    ))
}

fn gather_rows(m: &EmbeddingMatrix, members: &[u32]) -> EmbeddingMatrix {
    let dim = m.dim();
    let mut data = Vec::with_capacity(members.len() * dim);
    for &i in members {
        data.extend_from_slice(m.row(i as usize));
    }
    EmbeddingMatrix::from_parts_unchecked(members.len(), dim, data, m.is_normalized())
}

/// Score every query slot of one reference block with a local detector,
/// given the neighbor sets of all reference rows.
fn score_queries_local(
    det: &DetectorConfig,
    all_ns: &[NeighborSet],
    n_queries: usize,
) -> Vec<f64> {
    match det.kind {
        DetectorKind::KDist => (0..n_queries).map(|q| score_kdist(&all_ns[q])).collect(),
        DetectorKind::Lid => (0..n_queries)
            .map(|q| {
                lid_mle_unchecked(
                    &all_ns[q].distances,
                    det.epsilon,
                    det.lid_cap,
                    det.lid_denominator,
                )
            })
            .collect(),
        DetectorKind::Slof => {
            let kd: Vec<f64> = all_ns.iter().map(NeighborSet::kdist).collect();
            (0..n_queries)
                .map(|q| {
                    let nb: Vec<f64> = all_ns[q].indices.iter().map(|&j| kd[j]).collect();
                    score_slof(&all_ns[q], &nb, det.epsilon)
                })
                .collect()
        }
        DetectorKind::Dao => {
            let kd: Vec<f64> = all_ns.iter().map(NeighborSet::kdist).collect();
            let lids: Vec<f64> = all_ns
                .iter()
                .map(|ns| {
                    lid_mle_unchecked(&ns.distances, det.epsilon, det.lid_cap, det.lid_denominator)
                })
                .collect();
            (0..n_queries)
                .map(|q| {
                    let nb_kd: Vec<f64> = all_ns[q].indices.iter().map(|&j| kd[j]).collect();
                    let nb_lid: Vec<f64> = all_ns[q].indices.iter().map(|&j| lids[j]).collect();
                    score_dao(&all_ns[q], &nb_kd, &nb_lid, det.epsilon)
                })
                .collect()
        }
        DetectorKind::IForest => unreachable!("iforest handled separately"),
    }
}

fn score_one_batch(
    handle: &DatasetHandle<'_>,
    det: &DetectorConfig,
    members: &[u32],
    forest_seed: u64,
) -> Result<Vec<f64>> {
    let images = gather_rows(handle.images, members);
    let texts = handle.texts.map(|t| gather_rows(t, members));
    let refs = build_reference_set(&images, texts.as_ref())?;
    match det.kind {
        DetectorKind::IForest => {
            let mut cfg = det.clone();
            cfg.seed = forest_seed;
            let forest = iforest_fit(&refs, &cfg)?;
            (0..members.len()).map(|q| forest.score(images.row(q))).collect()
        }
        _ => {
            let all_ns = knn_all_rows(&refs, det.k)?;
            Ok(score_queries_local(det, &all_ns, members.len()))
        }
    }
}

fn score_one_resample(
    handle: &DatasetHandle<'_>,
    det: &DetectorConfig,
    plan: &BatchPlan,
    i: usize,
) -> Result<f64> {
    let members = plan.resample_members(i);
    let images = gather_rows(handle.images, &members);
    let texts = handle.texts.map(|t| gather_rows(t, &members));
    let refs = build_reference_set(&images, texts.as_ref())?;
    match det.kind {
        DetectorKind::IForest => {
            let mut cfg = det.clone();
            cfg.seed = derive_seed(det.seed, i as u64);
            let forest = iforest_fit(&refs, &cfg)?;
            forest.score(images.row(0))
        }
        DetectorKind::KDist | DetectorKind::Lid => {
            let ns = knn_rows_within(&refs, &[0], det.k)?.pop().unwrap();
            Ok(match det.kind {
                DetectorKind::KDist => score_kdist(&ns),
                _ => lid_mle_unchecked(
                    &ns.distances,
                    det.epsilon,
                    det.lid_cap,
                    det.lid_denominator,
                ),
            })
        }
        DetectorKind::Slof | DetectorKind::Dao => {
            let ns = knn_rows_within(&refs, &[0], det.k)?.pop().unwrap();
            let nb_ns = knn_rows_within(&refs, &ns.indices, det.k)?;
            let nb_kd: Vec<f64> = nb_ns.iter().map(NeighborSet::kdist).collect();
            Ok(if det.kind == DetectorKind::Slof {
                score_slof(&ns, &nb_kd, det.epsilon)
            } else {
                let nb_lid: Vec<f64> = nb_ns
                    .iter()
                    .map(|n| {
                        lid_mle_unchecked(
                            &n.distances,
                            det.epsilon,
                            det.lid_cap,
                            det.lid_denominator,
                        )
                    })
                    .collect();
                score_dao(&ns, &nb_kd, &nb_lid, det.epsilon)
            })
        }
    }
}

/// Score every sample of the dataset. Deterministic given
/// (plan.seed, det.seed): batches are independent work items whose results
/// land in disjoint index ranges, so the output is byte-identical across
/// any degree of parallelism.
pub fn score_dataset(
    handle: &DatasetHandle<'_>,
    det: &DetectorConfig,
    plan: &BatchPlan,
) -> Result<ScoreVector> {
    handle.validate()?;
    det.validate()?;
    if plan.n() != handle.n() {
        return Err(Error::CountMismatch {
            left: plan.n(),
            right: handle.n(),
        });
    }
    let ref_factor = if handle.texts.is_some() { 2 } else { 1 };
    let min_refs = plan.min_batch_len() * ref_factor;
    if det.kind != DetectorKind::IForest && det.k + 1 > min_refs {
        return Err(Error::KTooLarge {
            k: det.k,
            refs: min_refs,
            exclude_self: true,
        });
    }

    let n = handle.n();
    let mut scores = vec![0.0f64; n];
    match plan.mode() {
        BatchMode::Partition => {
            let per_batch: Vec<Vec<f64>> = plan
                .batches()
                .par_iter()
                .enumerate()
                .map(|(bi, members)| {
                    score_one_batch(handle, det, members, derive_seed(det.seed, bi as u64))
                })
                .collect::<Result<_>>()?;
            for (members, batch_scores) in plan.batches().iter().zip(per_batch) {
                for (&m, s) in members.iter().zip(batch_scores) {
                    scores[m as usize] = s;
                }
            }
        }
        BatchMode::Resample => {
            let computed: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| score_one_resample(handle, det, plan, i))
                .collect::<Result<_>>()?;
            scores = computed;
        }
    }
    ScoreVector::new(scores, det.kind)
}
