//! Exact batched k-nearest-neighbor computation.
//!
//! Brute force within a batch, no approximate indexes: batch sizes stay in
//! the low thousands, so exact O(B^2 d) is affordable and keeps results
//! reproducible. Distances are Euclidean, accumulated in f64 over f32 rows
//! with a fixed summation order, so output is byte-identical regardless of
//! how work is scheduled around these functions.
//!
//! The squared-distance kernel exists in portable, AVX2 and AVX-512 forms
//! that produce bit-identical sums: all assign dimensions to the same
//! accumulator lanes, use separate multiply and add, and reduce lanes in
//! the same order. Runtime dispatch therefore never changes scores.

use crate::error::{Error, Result};
use crate::store::EmbeddingMatrix;

/// Ascending k-nearest-neighbor distances and reference indices for one query.
///
/// Ties are broken by ascending reference index. Zero distances from exact
/// duplicate points are kept as-is; detectors apply their own clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub k: usize,
    pub distances: Vec<f64>,
    pub indices: Vec<usize>,
}

impl NeighborSet {
    /// Distance to the k-th nearest neighbor (the last, largest radius).
    pub fn kdist(&self) -> f64 {
        *self.distances.last().expect("NeighborSet is never empty")
    }
}

/// Distance to the k-th nearest neighbor of a query.
pub fn kdist(ns: &NeighborSet) -> f64 {
    ns.kdist()
}

/// Squared Euclidean distance over two interleaved groups of eight f64
/// accumulators: dimension block 2t feeds group A lanes, block 2t+1 feeds
/// group B (lane = dimension mod 8 within its block). Each group reduces as
/// ((l0+l1)+(l2+l3)) + ((l4+l5)+(l6+l7)); the total is groupA + groupB plus
/// the scalar tail. The widened kernels below replicate this schedule
/// exactly over exactly-converted f64 rows (separate multiply and add, no
/// FMA), so every path returns bit-identical sums and scores do not depend
/// on which one runs.
fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [[0.0f64; 8]; 2];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xs, ys) in ca.zip(cb) {
        for g in 0..2 {
            for l in 0..8 {
                let d = xs[g * 8 + l] as f64 - ys[g * 8 + l] as f64;
                acc[g][l] += d * d;
            }
        }
    }
    // one more 8-block may remain before the scalar tail
    let mut offset = 0;
    if ra.len() >= 8 {
        for l in 0..8 {
            let d = ra[l] as f64 - rb[l] as f64;
            acc[0][l] += d * d;
        }
        offset = 8;
    }
    let mut tail = 0.0;
    for (x, y) in ra[offset..].iter().zip(rb[offset..].iter()) {
        let d = *x as f64 - *y as f64;
        tail += d * d;
    }
    let red = |l: [f64; 8]| ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
    red(acc[0]) + red(acc[1]) + tail
}

/// The same kernel over rows already widened to f64. Conversion from f32 is
/// exact, so this matches [`squared_distance`] bit for bit.
fn wide_distance_portable(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [[0.0f64; 8]; 2];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (xs, ys) in ca.zip(cb) {
        for g in 0..2 {
            for l in 0..8 {
                let d = xs[g * 8 + l] - ys[g * 8 + l];
                acc[g][l] += d * d;
            }
        }
    }
    let mut offset = 0;
    if ra.len() >= 8 {
        for l in 0..8 {
            let d = ra[l] - rb[l];
            acc[0][l] += d * d;
        }
        offset = 8;
    }
    let mut tail = 0.0;
    for (x, y) in ra[offset..].iter().zip(rb[offset..].iter()) {
        let d = x - y;
        tail += d * d;
    }
    let red = |l: [f64; 8]| ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
    red(acc[0]) + red(acc[1]) + tail
}

/// (l0+l1)+(l2+l3) over one 4-wide accumulator.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn reduce4(acc: std::arch::x86_64::__m256d) -> f64 {
    use std::arch::x86_64::*;
    let lo = _mm256_castpd256_pd128(acc);
    let hi = _mm256_extractf128_pd::<1>(acc);
    let s_lo = _mm_add_sd(lo, _mm_unpackhi_pd(lo, lo));
    let s_hi = _mm_add_sd(hi, _mm_unpackhi_pd(hi, hi));
    _mm_cvtsd_f64(_mm_add_sd(s_lo, s_hi))
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn wide_distance_avx2(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n16 = a.len() / 16 * 16;
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let mut a_lo = _mm256_setzero_pd();
    let mut a_hi = _mm256_setzero_pd();
    let mut b_lo = _mm256_setzero_pd();
    let mut b_hi = _mm256_setzero_pd();
    let mut i = 0;
    while i < n16 {
        let d0 = _mm256_sub_pd(_mm256_loadu_pd(pa.add(i)), _mm256_loadu_pd(pb.add(i)));
        let d1 = _mm256_sub_pd(_mm256_loadu_pd(pa.add(i + 4)), _mm256_loadu_pd(pb.add(i + 4)));
        let d2 = _mm256_sub_pd(_mm256_loadu_pd(pa.add(i + 8)), _mm256_loadu_pd(pb.add(i + 8)));
        let d3 = _mm256_sub_pd(_mm256_loadu_pd(pa.add(i + 12)), _mm256_loadu_pd(pb.add(i + 12)));
        a_lo = _mm256_add_pd(a_lo, _mm256_mul_pd(d0, d0));
        a_hi = _mm256_add_pd(a_hi, _mm256_mul_pd(d1, d1));
        b_lo = _mm256_add_pd(b_lo, _mm256_mul_pd(d2, d2));
        b_hi = _mm256_add_pd(b_hi, _mm256_mul_pd(d3, d3));
        i += 16;
    }
    if a.len() - n16 >= 8 {
        let d0 = _mm256_sub_pd(_mm256_loadu_pd(pa.add(i)), _mm256_loadu_pd(pb.add(i)));
        let d1 = _mm256_sub_pd(_mm256_loadu_pd(pa.add(i + 4)), _mm256_loadu_pd(pb.add(i + 4)));
        a_lo = _mm256_add_pd(a_lo, _mm256_mul_pd(d0, d0));
        a_hi = _mm256_add_pd(a_hi, _mm256_mul_pd(d1, d1));
        i += 8;
    }
    let sum = (reduce4(a_lo) + reduce4(a_hi)) + (reduce4(b_lo) + reduce4(b_hi));
    let mut tail = 0.0;
    for j in i..a.len() {
        let d = a[j] - b[j];
        tail += d * d;
    }
    sum + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn wide_distance_avx512(a: &[f64], b: &[f64]) -> f64 {
    use std::arch::x86_64::*;
    let n16 = a.len() / 16 * 16;
    let (pa, pb) = (a.as_ptr(), b.as_ptr());
    let mut acc_a = _mm512_setzero_pd();
    let mut acc_b = _mm512_setzero_pd();
    let mut i = 0;
    while i < n16 {
        let d = _mm512_sub_pd(_mm512_loadu_pd(pa.add(i)), _mm512_loadu_pd(pb.add(i)));
        acc_a = _mm512_add_pd(acc_a, _mm512_mul_pd(d, d));
        let e = _mm512_sub_pd(_mm512_loadu_pd(pa.add(i + 8)), _mm512_loadu_pd(pb.add(i + 8)));
        acc_b = _mm512_add_pd(acc_b, _mm512_mul_pd(e, e));
        i += 16;
    }
    if a.len() - n16 >= 8 {
        let d = _mm512_sub_pd(_mm512_loadu_pd(pa.add(i)), _mm512_loadu_pd(pb.add(i)));
        acc_a = _mm512_add_pd(acc_a, _mm512_mul_pd(d, d));
        i += 8;
    }
    let red_a =
        reduce4(_mm512_castpd512_pd256(acc_a)) + reduce4(_mm512_extractf64x4_pd::<1>(acc_a));
    let red_b =
        reduce4(_mm512_castpd512_pd256(acc_b)) + reduce4(_mm512_extractf64x4_pd::<1>(acc_b));
    let sum = red_a + red_b;
    let mut tail = 0.0;
    for j in i..a.len() {
        let d = a[j] - b[j];
        tail += d * d;
    }
    sum + tail
}

#[inline]
fn cmp_candidate(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[inline(always)]
fn heap_worse(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 > b.1)
}

/// Feed one candidate into a bounded max-heap over (distance, index) that
/// keeps the k smallest entries under the lexicographic order. Distances are
/// finite, so plain comparisons are total. The saturated reject path is
/// first; after warm-up almost every candidate takes it.
#[inline(always)]
fn topk_consider(slots: &mut [(f64, u32)], len: &mut usize, d: f64, idx: u32) {
    let k = slots.len();
    if *len == k {
        let root = slots[0];
        if d > root.0 || (d == root.0 && idx > root.1) {
            return;
        }
        slots[0] = (d, idx);
        let mut parent = 0;
        loop {
            let left = 2 * parent + 1;
            if left >= k {
                break;
            }
            let right = left + 1;
            let mut largest = parent;
            if heap_worse(slots[left], slots[largest]) {
                largest = left;
            }
            if right < k && heap_worse(slots[right], slots[largest]) {
                largest = right;
            }
            if largest == parent {
                break;
            }
            slots.swap(parent, largest);
            parent = largest;
        }
    } else {
        let mut child = *len;
        slots[child] = (d, idx);
        *len += 1;
        while child > 0 {
            let parent = (child - 1) / 2;
            if heap_worse(slots[child], slots[parent]) {
                slots.swap(child, parent);
                child = parent;
            } else {
                break;
            }
        }
    }
}

/// Rows per widened query block in the pair sweep; amortizes the f32 to f64
/// widening of each candidate row across the block.
const SWEEP_BLOCK: usize = 4;

#[inline(always)]
fn widen_row(src: &[f32], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *s as f64;
    }
}

/// One symmetric pass over all unordered row pairs, feeding both rows'
/// heaps. Rows are widened to f64 once per block (exact conversion), so the
/// inner kernel runs conversion-free. Monomorphized per kernel so the
/// distance code inlines into the sweep.
#[inline(always)]
fn pair_sweep<K: Fn(&[f64], &[f64]) -> f64>(
    data: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    slots: &mut [(f64, u32)],
    lens: &mut [usize],
    kernel: K,
) {
    let mut wide_block = vec![0.0f64; SWEEP_BLOCK * dim];
    let mut wide_j = vec![0.0f64; dim];
    let mut i0 = 0;
    while i0 < n {
        let block = SWEEP_BLOCK.min(n - i0);
        for r in 0..block {
            widen_row(
                &data[(i0 + r) * dim..(i0 + r + 1) * dim],
                &mut wide_block[r * dim..(r + 1) * dim],
            );
        }
        for j in i0 + 1..n {
            widen_row(&data[j * dim..(j + 1) * dim], &mut wide_j);
            for r in 0..block.min(j - i0) {
                let i = i0 + r;
                let d = kernel(&wide_block[r * dim..(r + 1) * dim], &wide_j);
                topk_consider(&mut slots[i * k..(i + 1) * k], &mut lens[i], d, j as u32);
                topk_consider(&mut slots[j * k..(j + 1) * k], &mut lens[j], d, i as u32);
            }
        }
        i0 += block;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn pair_sweep_avx2(
    data: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    slots: &mut [(f64, u32)],
    lens: &mut [usize],
) {
    pair_sweep(data, n, dim, k, slots, lens, |a, b| unsafe {
        wide_distance_avx2(a, b)
    });
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn pair_sweep_avx512(
    data: &[f32],
    n: usize,
    dim: usize,
    k: usize,
    slots: &mut [(f64, u32)],
    lens: &mut [usize],
) {
    pair_sweep(data, n, dim, k, slots, lens, |a, b| unsafe {
        wide_distance_avx512(a, b)
    });
}

fn heap_slice_to_neighbor_set(slots: &mut [(f64, u32)]) -> NeighborSet {
    slots.sort_unstable_by(cmp_candidate);
    NeighborSet {
        k: slots.len(),
        distances: slots.iter().map(|c| c.0.sqrt()).collect(),
        indices: slots.iter().map(|c| c.1 as usize).collect(),
    }
}

/// Full |queries| x |refs| Euclidean distance block, row-major.
pub fn pairwise_distances(queries: &EmbeddingMatrix, refs: &EmbeddingMatrix) -> Result<Vec<f64>> {
    if queries.dim() != refs.dim() {
        return Err(Error::DimMismatch {
            left: queries.dim(),
            right: refs.dim(),
        });
    }
    let nq = queries.count();
    let nr = refs.count();
    let mut out = vec![0.0f64; nq * nr];
    for i in 0..nq {
        let q = queries.row(i);
        let row = &mut out[i * nr..(i + 1) * nr];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = squared_distance(q, refs.row(j)).sqrt();
        }
    }
    Ok(out)
}

fn select_k(candidates: &mut Vec<(f64, u32)>, k: usize) -> NeighborSet {
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, cmp_candidate);
        candidates.truncate(k);
    }
    heap_slice_to_neighbor_set(candidates)
}

/// k nearest neighbors of every query row among the reference rows.
///
/// `exclude` optionally maps each query to the reference slot holding the
/// query itself; that slot is skipped. Exclusion is by index identity, not by
/// zero distance, so genuine duplicate samples remain valid neighbors.
pub fn knn(
    queries: &EmbeddingMatrix,
    refs: &EmbeddingMatrix,
    k: usize,
    exclude: Option<&[usize]>,
) -> Result<Vec<NeighborSet>> {
    if queries.dim() != refs.dim() {
        return Err(Error::DimMismatch {
            left: queries.dim(),
            right: refs.dim(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let nr = refs.count();
    let budget = nr - usize::from(exclude.is_some());
    if k > budget {
        return Err(Error::KTooLarge {
            k,
            refs: nr,
            exclude_self: exclude.is_some(),
        });
    }
    if let Some(map) = exclude {
        if map.len() != queries.count() {
            return Err(Error::CountMismatch {
                left: map.len(),
                right: queries.count(),
            });
        }
    }

    let mut candidates: Vec<(f64, u32)> = Vec::with_capacity(nr);
    let mut out = Vec::with_capacity(queries.count());
    for i in 0..queries.count() {
        let q = queries.row(i);
        let skip = exclude.map(|m| m[i]);
        candidates.clear();
        for j in 0..nr {
            if Some(j) == skip {
                continue;
            }
            candidates.push((squared_distance(q, refs.row(j)), j as u32));
        }
        out.push(select_k(&mut candidates, k));
    }
    Ok(out)
}

/// k nearest neighbors for selected rows of the reference set, each
/// excluding its own slot. Used when only a query and its neighbors need
/// neighbor sets, as in resample-mode scoring.
pub(crate) fn knn_rows_within(
    refs: &EmbeddingMatrix,
    rows: &[usize],
    k: usize,
) -> Result<Vec<NeighborSet>> {
    let n = refs.count();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < 2 || k > n - 1 {
        return Err(Error::KTooLarge {
            k,
            refs: n,
            exclude_self: true,
        });
    }
    let mut candidates: Vec<(f64, u32)> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(rows.len());
    for &i in rows {
        let q = refs.row(i);
        candidates.clear();
        for j in 0..n {
            if j != i {
                candidates.push((squared_distance(q, refs.row(j)), j as u32));
            }
        }
        out.push(select_k(&mut candidates, k));
    }
    Ok(out)
}

/// k nearest neighbors of every reference row within the reference set
/// itself, each row excluding its own slot.
///
/// This is the workhorse of batch scoring: it yields kdist for every point
/// that can appear as a neighbor. Each unordered pair is evaluated once and
/// feeds the bounded top-k heaps of both rows, so no distance block is
/// materialized.
pub fn knn_all_rows(refs: &EmbeddingMatrix, k: usize) -> Result<Vec<NeighborSet>> {
    let n = refs.count();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if n < 2 || k > n - 1 {
        return Err(Error::KTooLarge {
            k,
            refs: n,
            exclude_self: true,
        });
    }

    let dim = refs.dim();
    let data = refs.data();
    let mut slots = vec![(f64::INFINITY, u32::MAX); n * k];
    let mut lens = vec![0usize; n];

    // sound: each sweep variant runs only after its feature was detected
    #[cfg(target_arch = "x86_64")]
    let used_simd = if std::arch::is_x86_feature_detected!("avx512f") {
        unsafe { pair_sweep_avx512(data, n, dim, k, &mut slots, &mut lens) };
        true
    } else if std::arch::is_x86_feature_detected!("avx2") {
        unsafe { pair_sweep_avx2(data, n, dim, k, &mut slots, &mut lens) };
        true
    } else {
        false
    };
    #[cfg(not(target_arch = "x86_64"))]
    let used_simd = false;
    if !used_simd {
        pair_sweep(data, n, dim, k, &mut slots, &mut lens, wide_distance_portable);
    }

    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        debug_assert_eq!(lens[i], k);
        out.push(heap_slice_to_neighbor_set(&mut slots[i * k..(i + 1) * k]));
    }
    Ok(out)
}
