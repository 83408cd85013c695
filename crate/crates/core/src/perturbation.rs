//! Latent perturbation: synthetic sampling error injected into quantized grids.
//!
//! A perturbed grid has exactly `round(alpha * H * W)` positions whose token is
//! swapped for one of its `delta` nearest codewords. Across a batch, exactly
//! `round(beta * N)` grids are perturbed and the rest pass through untouched.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codebook::{LatentGrid, NeighborTable};
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::{derive_seed, derive_tagged, rng_from, round_half_up};

/// Perturbation rate, proportion and strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    /// Fraction of tokens perturbed within one grid.
    pub alpha: f64,
    /// Fraction of grids in a batch that are perturbed.
    pub beta: f64,
    /// Neighbor-set size replacements are drawn from.
    pub delta: usize,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl PerturbSpec {
    pub fn none() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            delta: 1,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        check_delta(self.delta, k)
    }
}

fn check_delta(delta: usize, k: usize) -> Result<()> {
    if delta < 1 || delta + 1 > k {
        return Err(invalid(format!("delta must lie in [1, {}], got {delta}", k.saturating_sub(1))));
    }
    Ok(())
}

/// A grid after perturbation plus the positions that were changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedGrid {
    pub grid: LatentGrid,
    pub mask: Vec<bool>,
}

impl PerturbedGrid {
    pub fn untouched(grid: LatentGrid) -> Self {
        let mask = vec![false; grid.len()];
        Self { grid, mask }
    }

    pub fn perturbed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Number of perturbed tokens for a grid of `n` positions.
pub fn perturbed_token_count(alpha: f64, n: usize) -> usize {
    round_half_up(alpha * n as f64).min(n)
}

pub fn perturb_grid(
    grid: &LatentGrid,
    table: &NeighborTable,
    alpha: f64,
    delta: usize,
    seed: u64,
) -> Result<PerturbedGrid> {
    check_delta(delta, table.k())?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    grid.check_range(table.k())?;
    let n = grid.len();
    let count = perturbed_token_count(alpha, n);
    let mut out = PerturbedGrid::untouched(grid.clone());
    if count == 0 {
        return Ok(out);
    }
    let mut rng = rng_from(seed);
    let mut positions = index::sample(&mut rng, n, count).into_vec();
    positions.sort_unstable();
    for p in positions {
        let k = grid.indices[p] as usize;
        let candidates = table.neighbor_set(k, delta)?;
        out.grid.indices[p] = candidates[rng.random_range(0..delta)];
        out.mask[p] = true;
    }
    Ok(out)
}

/// Result of perturbing a batch: one entry per input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPerturbation {
    pub grids: Vec<PerturbedGrid>,
    /// True for grids chosen for perturbation.
    pub selected: Vec<bool>,
}

pub fn perturb_batch(
    grids: &[LatentGrid],
    table: &NeighborTable,
    spec: &PerturbSpec,
    seed: u64,
) -> Result<BatchPerturbation> {
    spec.validate(table.k())?;
    let n = grids.len();
    let chosen = round_half_up(spec.beta * n as f64).min(n);
    let mut selected = vec![false; n];
    let mut rng = rng_from(derive_tagged(seed, "batch-selection"));
    for i in index::sample(&mut rng, n, chosen) {
        selected[i] = true;
    }
    let results = par::map_range(n, |i| {
        if selected[i] {
            perturb_grid(&grids[i], table, spec.alpha, spec.delta, derive_seed(seed, i as u64))
        } else {
            Ok(PerturbedGrid::untouched(grids[i].clone()))
        }
    });
    Ok(BatchPerturbation {
        grids: results.into_iter().collect::<Result<_>>()?,
        selected,
    })
}

/// Linear decay of `(alpha, delta)` from their initial values toward
/// `end_factor` times those values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub alpha0: f64,
    pub delta0: usize,
    /// Terminal multiplier; 1.0 disables annealing, 0.0 anneals to nothing.
    pub end_factor: f64,
    pub total_steps: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self::constant(0.0, 1)
    }
}

impl AnnealSchedule {
    pub fn constant(alpha0: f64, delta0: usize) -> Self {
        Self {
            alpha0,
            delta0,
            end_factor: 1.0,
            total_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.end_factor) {
            return Err(invalid(format!("end_factor must lie in [0, 1], got {}", self.end_factor)));
        }
        if self.total_steps == 0 {
            return Err(invalid("anneal total_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha0) || self.delta0 == 0 {
            return Err(invalid("anneal start values out of range"));
        }
        Ok(())
    }

    /// `(alpha_t, delta_t)` at `step`; steps past the end hold terminal values.
    pub fn at(&self, step: usize) -> (f64, usize) {
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        let scale = 1.0 - (1.0 - self.end_factor) * frac;
        let delta = round_half_up(self.delta0 as f64 * scale).max(1);
        (self.alpha0 * scale, delta)
    }
}

pub fn anneal(schedule: &AnnealSchedule, step: usize) -> (f64, usize) {
    schedule.at(step)
}

/// Rescales a perturbation strength defined for a `k_ref`-entry codebook to
/// one with `k` entries, clamped to `[1, k - 1]`.
pub fn effective_delta(delta_base: usize, k: usize, k_ref: usize) -> usize {
    let scaled = round_half_up(delta_base as f64 * k as f64 / k_ref as f64);
    scaled.clamp(1, k.saturating_sub(1).max(1))
}
