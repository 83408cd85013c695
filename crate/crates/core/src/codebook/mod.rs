//! Discrete codebook, nearest-codeword quantization and neighbor sets.

mod kmeans;

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RtkError};
use crate::par;

pub use kmeans::{kmeans, KMeansResult};

/// Magic bytes at the start of a codebook file.
pub const CODEBOOK_MAGIC: &[u8; 8] = b"RTKCBK01";

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A set of `K` distinct codeword vectors of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Vec<f64>,
    k: usize,
    dim: usize,
}

impl Codebook {
    pub fn new(entries: Vec<f64>, k: usize, dim: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("codebook needs K >= 2, got {k}")));
        }
        if dim < 1 {
            return Err(invalid("codebook needs C_dim >= 1"));
        }
        if entries.len() != k * dim {
            return Err(invalid(format!(
                "codebook expects {} values, got {}",
                k * dim,
                entries.len()
            )));
        }
        let cb = Self { entries, k, dim };
        cb.validate()?;
        Ok(cb)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(invalid("codebook rows have unequal length"));
        }
        Self::new(rows.concat(), rows.len(), dim)
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self.entries.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite codebook value in codeword {}",
                i / self.dim
            )));
        }
        let mut seen = HashSet::with_capacity(self.k);
        for (i, row) in self.entries.chunks_exact(self.dim).enumerate() {
            // +0.0 normalizes -0.0 so numerically equal rows collide.
            let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
            if !seen.insert(key) {
                return Err(invalid(format!("duplicate codeword at index {i}")));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn codeword(&self, index: usize) -> &[f64] {
        &self.entries[index * self.dim..(index + 1) * self.dim]
    }

    /// Mutates the entries in place, then re-checks every invariant.
    pub fn update_with<F: FnOnce(&mut [f64])>(&mut self, f: F) -> Result<()> {
        f(&mut self.entries);
        self.validate()
    }

    /// Nearest codeword by squared L2 distance; ties go to the smallest index.
    pub fn quantize(&self, z: &[f64]) -> Result<(usize, &[f64])> {
        if z.len() != self.dim {
            return Err(invalid(format!(
                "vector has dimension {}, codebook has {}",
                z.len(),
                self.dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid("cannot quantize a non-finite vector"));
        }
        let idx = self.nearest_unchecked(z);
        Ok((idx, self.codeword(idx)))
    }

    pub(crate) fn nearest_unchecked(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(z, e);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Quantizes an `h × w × dim` array (row-major) position by position.
    pub fn quantize_grid(&self, z: &[f64], h: usize, w: usize) -> Result<LatentGrid> {
        if z.len() != h * w * self.dim || h == 0 || w == 0 {
            return Err(invalid(format!(
                "latent array of length {} does not match {h}x{w}x{}",
                z.len(),
                self.dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(invalid("cannot quantize a non-finite latent grid"));
        }
        let indices = par::map_range(h * w, |p| {
            self.nearest_unchecked(&z[p * self.dim..(p + 1) * self.dim]) as u32
        });
        Ok(LatentGrid { h, w, indices })
    }

    /// Flattened codewords of every grid position.
    pub fn lookup(&self, grid: &LatentGrid) -> Vec<f64> {
        let mut out = Vec::with_capacity(grid.len() * self.dim);
        for &i in &grid.indices {
            out.extend_from_slice(self.codeword(i as usize));
        }
        out
    }

    /// Writes the versioned binary layout: magic, u32 K, u32 C_dim, then f32 LE values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.entries {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(RtkError::Format("bad codebook magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let k = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut entries = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            r.read_exact(&mut b4)?;
            entries.push(f32::from_le_bytes(b4) as f64);
        }
        Self::new(entries, k, dim)
    }
}

/// An `h × w` grid of codeword indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u32>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != h * w {
            return Err(invalid(format!(
                "grid {h}x{w} needs {} indices, got {}",
                h * w,
                indices.len()
            )));
        }
        Ok(Self { h, w, indices })
    }

    pub fn filled(h: usize, w: usize, index: u32) -> Self {
        Self {
            h,
            w,
            indices: vec![index; h * w],
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i as usize >= k) {
            Some(i) => Err(invalid(format!("grid index {i} out of range for K = {k}"))),
            None => Ok(()),
        }
    }
}

/// For each codeword, every other index sorted by distance (ties by index).
#[derive(Debug, Clone)]
pub struct NeighborTable {
    k: usize,
    rows: Vec<u32>,
}

impl NeighborTable {
    pub fn build(cb: &Codebook) -> Self {
        let k = cb.k();
        let rows = par::map_range(k, |i| {
            let ei = cb.codeword(i);
            let mut row: Vec<(f64, u32)> = (0..k)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(ei, cb.codeword(j)), j as u32))
                .collect();
            row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            row.into_iter().map(|(_, j)| j).collect::<Vec<u32>>()
        });
        Self {
            k,
            rows: rows.concat(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, index: usize) -> &[u32] {
        let w = self.k - 1;
        &self.rows[index * w..(index + 1) * w]
    }

    /// The `delta` nearest other codewords of `index`.
    pub fn neighbor_set(&self, index: usize, delta: usize) -> Result<&[u32]> {
        if index >= self.k {
            return Err(invalid(format!("index {index} out of range for K = {}", self.k)));
        }
        if delta < 1 || delta > self.k - 1 {
            return Err(invalid(format!(
                "delta must lie in [1, {}], got {delta}",
                self.k - 1
            )));
        }
        Ok(&self.row(index)[..delta])
    }
}

/// Per-codeword usage counts over a set of grids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageHistogram {
    pub counts: Vec<u64>,
    pub total: u64,
}

impl UsageHistogram {
    pub fn merge(&self, other: &UsageHistogram) -> Result<UsageHistogram> {
        if self.counts.len() != other.counts.len() {
            return Err(invalid("histograms cover different codebook sizes"));
        }
        Ok(UsageHistogram {
            counts: self.counts.iter().zip(&other.counts).map(|(a, b)| a + b).collect(),
            total: self.total + other.total,
        })
    }
}

pub fn usage_histogram(grids: &[LatentGrid], k: usize) -> Result<UsageHistogram> {
    for g in grids {
        g.check_range(k)?;
    }
    let partial = par::map_slice(grids, |g| {
        let mut c = vec![0u64; k];
        for &i in &g.indices {
            c[i as usize] += 1;
        }
        c
    });
    let mut counts = vec![0u64; k];
    for c in partial {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
    }
    let total = counts.iter().sum();
    Ok(UsageHistogram { counts, total })
}

/// One row of the usage-truncation analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncationRow {
    pub threshold: u64,
    /// Codewords used at least `threshold` times.
    pub key_tokens: usize,
    /// Share of all usage those codewords account for.
    pub coverage: f64,
}

pub fn usage_truncation_report(hist: &UsageHistogram, thresholds: &[u64]) -> Vec<TruncationRow> {
    thresholds
        .iter()
        .map(|&t| {
            let kept: Vec<u64> = hist.counts.iter().copied().filter(|&c| c >= t).collect();
            let used: u64 = kept.iter().sum();
            let coverage = if hist.total == 0 {
                if kept.len() == hist.counts.len() {
                    1.0
                } else {
                    0.0
                }
            } else {
                used as f64 / hist.total as f64
            };
            TruncationRow {
                threshold: t,
                key_tokens: kept.len(),
                coverage,
            }
        })
        .collect()
}
