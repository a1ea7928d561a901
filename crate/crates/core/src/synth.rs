//! Seeded synthetic embedding datasets and the controlled experiments that
//! make detector claims checkable at desk scale.
//!
//! Clean samples are drawn per-cluster as isotropic Gaussians around random
//! unit-sphere centroids, then renormalized. Backdoor samples share one
//! dedicated centroid with a much smaller spread, placed a configurable
//! distance away from its anchor clean centroid: a tight, isolated cluster,
//! which is the geometry that makes poisoned samples local outliers. Text
//! embeddings are jittered copies of their image embedding.
//!
//! Sigma parameters are expected cluster radii: the per-coordinate Gaussian
//! deviation is sigma/sqrt(d), so cluster extent relative to the unit sphere
//! does not depend on the embedding dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::derive_seed;
use crate::detectors::{DetectorConfig, DetectorKind};
use crate::error::{Error, Result};
use crate::knn::knn_all_rows;
use crate::metrics;
use crate::pipeline::{build_reference_set, plan_batches, score_dataset, BatchMode, DatasetHandle};
use crate::store::{EmbeddingMatrix, LabelVector};

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Total samples.
    pub n: usize,
    /// Embedding dimensionality.
    pub d: usize,
    /// Number of clean clusters.
    pub n_clusters: usize,
    /// Fraction of samples carrying the backdoor, in [0, 0.2].
    pub poison_rate: f64,
    /// Clean cluster radius (per-coordinate deviation sigma_clean/sqrt(d)).
    pub sigma_clean: f64,
    /// Backdoor cluster radius; must be below sigma_clean.
    pub sigma_backdoor: f64,
    /// Distance from the backdoor centroid to its anchor clean centroid, in
    /// units of sigma_clean.
    pub backdoor_offset: f64,
    /// Emit text embeddings as jittered copies of the image embeddings.
    pub with_text: bool,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            d: 512,
            n_clusters: 50,
            poison_rate: 0.0001,
            sigma_clean: 0.2,
            sigma_backdoor: 0.02,
            backdoor_offset: 5.0,
            with_text: true,
            seed,
        }
    }

    /// Number of backdoor rows implied by the poisoning rate.
    pub fn n_backdoor(&self) -> usize {
        (self.poison_rate * self.n as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 {
            return fail("n must be at least 1".into());
        }
        if self.d == 0 {
            return fail("d must be at least 1".into());
        }
        if self.n_clusters == 0 {
            return fail("n_clusters must be at least 1".into());
        }
        if !(0.0..=0.2).contains(&self.poison_rate) {
            return fail(format!(
                "poison_rate must lie in [0, 0.2], got {}",
                self.poison_rate
            ));
        }
        if !(self.sigma_clean > 0.0) {
            return fail("sigma_clean must be positive".into());
        }
        if !(self.sigma_backdoor > 0.0) {
            return fail("sigma_backdoor must be positive".into());
        }
        if self.sigma_backdoor >= self.sigma_clean {
            return fail(format!(
                "sigma_backdoor ({}) must be below sigma_clean ({})",
                self.sigma_backdoor, self.sigma_clean
            ));
        }
        if self.backdoor_offset < 0.0 {
            return fail("backdoor_offset must be nonnegative".into());
        }
        if self.poison_rate > 0.0 && self.n_backdoor() == 0 {
            return fail(format!(
                "poison_rate {} rounds to zero backdoor rows for n={}",
                self.poison_rate, self.n
            ));
        }
        Ok(())
    }
}

/// One generated dataset.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: EmbeddingMatrix,
    pub texts: Option<EmbeddingMatrix>,
    pub labels: LabelVector,
}

fn sample_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize_in_place(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        // astronomically unlikely; keep the draw deterministic anyway
        v.fill(0.0);
        v[0] = 1.0;
        return;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Generate a synthetic dataset. Fully determined by the config seed.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (n, d, clusters) = (cfg.n, cfg.d, cfg.n_clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // clean centroids on the unit sphere
    let mut centroids = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let mut c = sample_gaussian(&mut rng, d);
        normalize_in_place(&mut c);
        centroids.push(c);
    }

    // backdoor centroid: offset * sigma_clean away from a random anchor
    // centroid, along a random tangent direction on the sphere
    let anchor = &centroids[rng.random_range(0..clusters)];
    let mut tangent = sample_gaussian(&mut rng, d);
    let dot: f64 = tangent.iter().zip(anchor).map(|(t, c)| t * c).sum();
    for (t, c) in tangent.iter_mut().zip(anchor) {
        *t -= dot * c;
    }
    normalize_in_place(&mut tangent);
    let chord = (cfg.backdoor_offset * cfg.sigma_clean / 2.0).min(1.0);
    let theta = 2.0 * chord.asin();
    let backdoor_centroid: Vec<f64> = anchor
        .iter()
        .zip(&tangent)
        .map(|(c, t)| theta.cos() * c + theta.sin() * t)
        .collect();

    // backdoor rows scattered uniformly over the dataset
    let mut flags = vec![0u8; n];
    for p in rand::seq::index::sample(&mut rng, n, cfg.n_backdoor()) {
        flags[p] = 1;
    }

    let per_coord = 1.0 / (d as f64).sqrt();
    let mut data = vec![0.0f32; n * d];
    let mut row = vec![0.0f64; d];
    for i in 0..n {
        let (center, sigma) = if flags[i] == 1 {
            (&backdoor_centroid, cfg.sigma_backdoor * per_coord)
        } else {
            (
                &centroids[rng.random_range(0..clusters)],
                cfg.sigma_clean * per_coord,
            )
        };
        for (slot, c) in row.iter_mut().zip(center) {
            *slot = c + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        normalize_in_place(&mut row);
        for (out, v) in data[i * d..(i + 1) * d].iter_mut().zip(&row) {
            *out = *v as f32;
        }
    }
    let images = EmbeddingMatrix::from_parts_unchecked(n, d, data, true);

    let texts = if cfg.with_text {
        let jitter = cfg.sigma_clean / 2.0 * per_coord;
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            for (slot, v) in row.iter_mut().zip(images.row(i)) {
                *slot = *v as f64 + jitter * rng.sample::<f64, _>(StandardNormal);
            }
            normalize_in_place(&mut row);
            for (out, v) in data[i * d..(i + 1) * d].iter_mut().zip(&row) {
                *out = *v as f32;
            }
        }
        Some(EmbeddingMatrix::from_parts_unchecked(n, d, data, true))
    } else {
        None
    };

    Ok(SyntheticDataset {
        images,
        texts,
        labels: LabelVector::new(flags)?,
    })
}

/// Quartiles of one score group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

fn quartiles(values: &mut [f64]) -> Quartiles {
    values.sort_unstable_by(f64::total_cmp);
    let quantile = |q: f64| {
        let pos = q * (values.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
    };
    Quartiles {
        q1: quantile(0.25),
        median: quantile(0.5),
        q3: quantile(0.75),
    }
}

/// kdist summary of one controlled batch with a fixed backdoor count.
#[derive(Debug, Clone, Copy)]
pub struct KdistGroupSummary {
    pub backdoor_count: usize,
    pub clean: Quartiles,
    pub backdoor: Quartiles,
}

/// Controlled experiment behind the kdist-distribution figure: build one
/// batch per requested backdoor count, compute kdist for every image row in
/// the batch, and summarize the clean and backdoor groups.
pub fn kdist_distribution_experiment(
    cfg: &SyntheticConfig,
    batch_size: usize,
    k: usize,
    backdoor_counts: &[usize],
) -> Result<Vec<KdistGroupSummary>> {
    if batch_size < k + 1 {
        return Err(Error::BatchTooSmall { batch_size, k });
    }
    for &c in backdoor_counts {
        if c == 0 || c > batch_size / 2 {
            return Err(Error::InvalidConfig(format!(
                "backdoor count {c} must lie in [1, batch_size/2 = {}]",
                batch_size / 2
            )));
        }
    }

    let mut out = Vec::with_capacity(backdoor_counts.len());
    for (ci, &c) in backdoor_counts.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.n = batch_size;
        sub.poison_rate = c as f64 / batch_size as f64;
        sub.seed = derive_seed(cfg.seed, ci as u64);
        sub.validate()?;
        let ds = generate(&sub)?;
        debug_assert_eq!(ds.labels.n_backdoor(), c);

        let refs = build_reference_set(&ds.images, ds.texts.as_ref())?;
        let all_ns = knn_all_rows(&refs, k)?;
        let mut clean = Vec::new();
        let mut backdoor = Vec::new();
        for i in 0..batch_size {
            let kd = all_ns[i].kdist();
            if ds.labels.is_backdoor(i) {
                backdoor.push(kd);
            } else {
                clean.push(kd);
            }
        }
        out.push(KdistGroupSummary {
            backdoor_count: c,
            clean: quartiles(&mut clean),
            backdoor: quartiles(&mut backdoor),
        });
    }
    Ok(out)
}

/// One cell of the poisoning-rate sensitivity grid.
#[derive(Debug, Clone, Copy)]
pub struct SweepCell {
    pub detector: DetectorKind,
    pub rate: f64,
    pub k: usize,
    pub auc: f64,
}

/// Detectors evaluated by the sensitivity sweep, in emission order.
pub const SWEEP_DETECTORS: [DetectorKind; 4] = [
    DetectorKind::Lid,
    DetectorKind::KDist,
    DetectorKind::Slof,
    DetectorKind::Dao,
];

/// Score one freshly generated dataset per rate and report the AUC of each
/// local detector for every locality k.
pub fn poison_rate_sensitivity_sweep(
    cfg: &SyntheticConfig,
    batch_size: usize,
    rates: &[f64],
    k_values: &[usize],
) -> Result<Vec<SweepCell>> {
    for &rate in rates {
        if !(0.0001..=0.10).contains(&rate) {
            return Err(Error::InvalidConfig(format!(
                "sweep rates must lie in [0.0001, 0.10], got {rate}"
            )));
        }
    }
    for &k in k_values {
        if k < 2 {
            return Err(Error::InvalidConfig(
                "sweep k values must be at least 2 for LID and DAO".into(),
            ));
        }
    }

    let mut cells = Vec::new();
    for (ri, &rate) in rates.iter().enumerate() {
        let mut sub = cfg.clone();
        sub.poison_rate = rate;
        sub.seed = derive_seed(cfg.seed, 0x5EED_0000 + ri as u64);
        sub.validate()?;
        let ds = generate(&sub)?;
        let handle = DatasetHandle::new(&ds.images, ds.texts.as_ref(), Some(&ds.labels))?;
        for &k in k_values {
            let plan = plan_batches(
                sub.n,
                batch_size,
                k,
                derive_seed(sub.seed, k as u64),
                BatchMode::Partition,
            )?;
            for kind in SWEEP_DETECTORS {
                let det = DetectorConfig::new(kind)
                    .with_k(k)
                    .with_seed(derive_seed(sub.seed, 0xF0 + kind.tag() as u64));
                let scores = score_dataset(&handle, &det, &plan)?;
                let auc = metrics::auc(scores.scores(), &ds.labels)?;
                cells.push(SweepCell {
                    detector: kind,
                    rate,
                    k,
                    auc,
                });
            }
        }
    }
    Ok(cells)
}

/// Render sweep cells as CSV with header `detector,rate,k,auc`.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("detector,rate,k,auc\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{}\n",
            cell.detector, cell.rate, cell.k, cell.auc
        ));
    }
    out
}
