//! Binary storage for embedding matrices, label vectors and score vectors.
//!
//! All three formats are little-endian and bit-exact on round trip:
//!
//! * `EMB1`: magic, u32 count, u32 dim, then count*dim f32 values row-major.
//! * `LBL1`: magic, u32 count, then count bytes in {0, 1}.
//! * `SCR1`: magic, u32 count, one detector tag byte, then count f64 scores.
//!
//! Values are stored in single precision; all distance and score math
//! accumulates in double precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::detectors::DetectorKind;
use crate::error::{Error, Result};

const EMB_MAGIC: &[u8; 4] = b"EMB1";
const LBL_MAGIC: &[u8; 4] = b"LBL1";
const SCR_MAGIC: &[u8; 4] = b"SCR1";

/// Dense row-major matrix of sample embeddings.
///
/// Immutable once constructed; the `normalized` flag is a runtime property
/// (the on-disk format does not carry it) and is only set by
/// [`EmbeddingMatrix::l2_normalize`] or by generators that emit unit rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Build a matrix from row-major data, validating shape and finiteness.
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if count == 0 {
            return Err(Error::ZeroCount);
        }
        if dim == 0 {
            return Err(Error::ZeroDim);
        }
        if data.len() != count * dim {
            return Err(Error::CountMismatch {
                left: data.len(),
                right: count * dim,
            });
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: i / dim,
                    col: i % dim,
                });
            }
        }
        Ok(Self {
            count,
            dim,
            data,
            normalized: false,
        })
    }

    /// Internal constructor for rows copied out of an already-validated matrix.
    pub(crate) fn from_parts_unchecked(
        count: usize,
        dim: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Self {
        debug_assert_eq!(data.len(), count * dim);
        Self {
            count,
            dim,
            data,
            normalized,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Rescale every row to unit L2 norm. Norms accumulate in f64; rows are
    /// rewritten in place. Fails with [`Error::ZeroRow`] on an all-zero row.
    ///
    /// Idempotent within 1e-6 per element.
    pub fn l2_normalize(mut self) -> Result<Self> {
        for i in 0..self.count {
            let start = i * self.dim;
            let row = &mut self.data[start..start + self.dim];
            let norm_sq: f64 = row.iter().map(|&v| {
                let v = v as f64;
                v * v
            }).sum();
            if norm_sq == 0.0 {
                return Err(Error::ZeroRow(i));
            }
            let inv = 1.0 / norm_sq.sqrt();
            for v in row.iter_mut() {
                *v = (*v as f64 * inv) as f32;
            }
        }
        self.normalized = true;
        Ok(self)
    }
}

/// Per-sample ground-truth flags, 0 = clean and 1 = backdoor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    flags: Vec<u8>,
}

impl LabelVector {
    pub fn new(flags: Vec<u8>) -> Result<Self> {
        for (i, &v) in flags.iter().enumerate() {
            if v > 1 {
                return Err(Error::InvalidLabelValue { index: i, value: v });
            }
        }
        Ok(Self { flags })
    }

    pub fn count(&self) -> usize {
        self.flags.len()
    }

    pub fn flags(&self) -> &[u8] {
        &self.flags
    }

    pub fn is_backdoor(&self, i: usize) -> bool {
        self.flags[i] == 1
    }

    pub fn n_backdoor(&self) -> usize {
        self.flags.iter().filter(|&&v| v == 1).count()
    }

    pub fn n_clean(&self) -> usize {
        self.count() - self.n_backdoor()
    }
}

/// Per-sample anomaly scores; higher means more likely backdoor, uniformly
/// across detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f64>,
    detector: DetectorKind,
}

impl ScoreVector {
    pub fn new(scores: Vec<f64>, detector: DetectorKind) -> Result<Self> {
        for (i, v) in scores.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: i, col: 0 });
            }
        }
        Ok(Self { scores, detector })
    }

    pub fn count(&self) -> usize {
        self.scores.len()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn detector(&self) -> DetectorKind {
        self.detector
    }
}

fn read_magic(r: &mut impl Read, expected: &'static [u8; 4], name: &'static str) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadMagic { expected: name })?;
    if &magic != expected {
        return Err(Error::BadMagic { expected: name });
    }
    Ok(())
}

fn read_u32(r: &mut impl Read, expected_payload: u64) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| Error::TruncatedFile {
        expected: expected_payload,
        found: 0,
    })?;
    Ok(u32::from_le_bytes(buf))
}

/// Read the rest of the stream and insist it holds exactly `expected` bytes.
fn read_payload(r: &mut impl Read, expected: u64) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let found = payload.len() as u64;
    if found < expected {
        return Err(Error::TruncatedFile { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes { expected, found });
    }
    Ok(payload)
}

/// Load an `EMB1` embedding file. The declared count*dim must exactly match
/// the payload size and every value must be finite.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, EMB_MAGIC, "EMB1")?;
    let count = read_u32(&mut r, 8)? as usize;
    let dim = read_u32(&mut r, 8)? as usize;
    if dim == 0 {
        return Err(Error::ZeroDim);
    }
    if count == 0 {
        return Err(Error::ZeroCount);
    }
    let expected = count as u64 * dim as u64 * 4;
    let payload = read_payload(&mut r, expected)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    EmbeddingMatrix::new(count, dim, data)
}

/// Write an `EMB1` embedding file. Round-trips bit-exactly.
pub fn write_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let mut w = BufWriter::with_capacity(1 << 20, File::create(path)?);
    w.write_all(EMB_MAGIC)?;
    w.write_all(&(m.count as u32).to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Load an `LBL1` label file. A zero-count file yields an empty vector.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, LBL_MAGIC, "LBL1")?;
    let count = read_u32(&mut r, 4)? as usize;
    let payload = read_payload(&mut r, count as u64)?;
    LabelVector::new(payload)
}

pub fn write_labels(path: impl AsRef<Path>, l: &LabelVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LBL_MAGIC)?;
    w.write_all(&(l.count() as u32).to_le_bytes())?;
    w.write_all(&l.flags)?;
    w.flush()?;
    Ok(())
}

/// Load an `SCR1` score file.
pub fn load_scores(path: impl AsRef<Path>) -> Result<ScoreVector> {
    let mut r = BufReader::new(File::open(path)?);
    read_magic(&mut r, SCR_MAGIC, "SCR1")?;
    let count = read_u32(&mut r, 9)? as usize;
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(|_| Error::TruncatedFile {
        expected: 1 + count as u64 * 8,
        found: 0,
    })?;
    let detector = DetectorKind::from_tag(tag[0])?;
    let payload = read_payload(&mut r, count as u64 * 8)?;
    let scores: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| {
            let mut b = [0u8; 8];
            b.copy_from_slice(c);
            f64::from_le_bytes(b)
        })
        .collect();
    ScoreVector::new(scores, detector)
}

/// Write an `SCR1` score file. Round-trips bit-exactly.
pub fn write_scores(path: impl AsRef<Path>, s: &ScoreVector) -> Result<()> {
    let mut w = BufWriter::with_capacity(1 << 20, File::create(path)?);
    w.write_all(SCR_MAGIC)?;
    w.write_all(&(s.count() as u32).to_le_bytes())?;
    w.write_all(&[s.detector.tag()])?;
    for v in &s.scores {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Write scores as CSV with header `index,score`, rows in index order.
pub fn write_scores_csv(path: impl AsRef<Path>, s: &ScoreVector) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,score")?;
    for (i, v) in s.scores.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(())
}
