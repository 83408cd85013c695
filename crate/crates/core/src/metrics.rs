//! Fréchet distance (rFID / pFID at desk scale) and kernel MMD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RtkError};
use crate::par;
use crate::perturbation::effective_delta;
use crate::rng::{derive_seed, rng_from};
use crate::tokenizer::{encode, reconstruct, ImageBatch, ReconPerturbation, TokenizerState};

/// Image features standing in for an Inception embedding.
#[derive(Debug, Clone)]
pub enum FeatureExtractor {
    /// Average-pooled pixels at `size × size`.
    DownsampledPixels { size: usize },
    /// Seeded Gaussian projection of the `size × size` pooled pixels to `dim`.
    RandomProjection { size: usize, dim: usize, seed: u64 },
    /// 2×2 region means of a tokenizer's continuous latents.
    TrainedProbe(Box<TokenizerState>),
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::RandomProjection {
            size: 16,
            dim: 64,
            seed: 0xF1D,
        }
    }
}

fn downsample(images: &ImageBatch, i: usize, size: usize) -> Vec<f64> {
    let s = images.size;
    let c = images.channels;
    let f = s / size;
    let img = images.image(i);
    let mut out = vec![0.0; size * size * c];
    for y in 0..s {
        for x in 0..s {
            let o = ((y / f) * size + x / f) * c;
            for ch in 0..c {
                out[o + ch] += img[(y * s + x) * c + ch];
            }
        }
    }
    let norm = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

impl FeatureExtractor {
    pub fn dim(&self, images: &ImageBatch) -> usize {
        match self {
            FeatureExtractor::DownsampledPixels { size } => size * size * images.channels,
            FeatureExtractor::RandomProjection { dim, .. } => *dim,
            FeatureExtractor::TrainedProbe(state) => 4 * state.arch.latent_dim,
        }
    }

    /// Features of every image, `n × dim` row-major.
    pub fn extract(&self, images: &ImageBatch) -> Result<Vec<f64>> {
        match self {
            FeatureExtractor::DownsampledPixels { size } => {
                check_pool(images, *size)?;
                Ok(par::map_range(images.n, |i| downsample(images, i, *size)).concat())
            }
            FeatureExtractor::RandomProjection { size, dim, seed } => {
                check_pool(images, *size)?;
                let inputs = size * size * images.channels;
                let mut rng = rng_from(*seed);
                let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
                let proj: Vec<f64> = (0..dim * inputs).map(|_| normal.sample(&mut rng)).collect();
                Ok(par::map_range(images.n, |i| {
                    let x = downsample(images, i, *size);
                    proj.chunks_exact(inputs)
                        .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
                        .collect::<Vec<f64>>()
                })
                .concat())
            }
            FeatureExtractor::TrainedProbe(state) => {
                let z = encode(images, state)?;
                let g = state.arch.grid();
                let c = state.arch.latent_dim;
                let per = g * g * c;
                let half = g.div_ceil(2);
                Ok((0..images.n)
                    .flat_map(|i| {
                        let zi = &z[i * per..(i + 1) * per];
                        let mut f = vec![0.0; 4 * c];
                        let mut counts = [0usize; 4];
                        for y in 0..g {
                            for x in 0..g {
                                let q = (y / half) * 2 + x / half;
                                counts[q] += 1;
                                for j in 0..c {
                                    f[q * c + j] += zi[(y * g + x) * c + j];
                                }
                            }
                        }
                        for q in 0..4 {
                            for j in 0..c {
                                f[q * c + j] /= counts[q].max(1) as f64;
                            }
                        }
                        f
                    })
                    .collect())
            }
        }
    }
}

fn check_pool(images: &ImageBatch, size: usize) -> Result<()> {
    if size == 0 || images.size % size != 0 {
        return Err(invalid(format!(
            "cannot pool {}x{} images to {size}x{size}",
            images.size, images.size
        )));
    }
    Ok(())
}

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    /// `d × d`, row-major, symmetric.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased covariance of `features` (`n × d`).
pub fn fit_gaussian(features: &[f64], d: usize) -> Result<GaussianStats> {
    if d == 0 || features.len() % d != 0 {
        return Err(invalid("feature array is not a whole number of rows"));
    }
    let n = features.len() / d;
    if n < 2 {
        return Err(RtkError::InsufficientSamples { needed: 2, got: n });
    }
    let mut mu = vec![0.0; d];
    for row in features.chunks_exact(d) {
        mu.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut s = vec![0.0; d * d];
    for row in features.chunks_exact(d) {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                s[i * d + j] += di * (row[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = s[i * d + j] / (n - 1) as f64;
            s[i * d + j] = v;
            s[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mu, sigma: s, n })
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||² + Tr(S_a) + Tr(S_b) - 2 Tr((S_a^½ S_b S_a^½)^½)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.sigma.len() != d * d || b.sigma.len() != d * d {
        return Err(invalid(format!("dimension mismatch: {} vs {}", d, b.dim())));
    }
    let sa = DMatrix::from_row_slice(d, d, &a.sigma);
    let sb = DMatrix::from_row_slice(d, d, &b.sigma);
    if sa.iter().chain(sb.iter()).any(|v| !v.is_finite()) {
        return Err(RtkError::Numerical("non-finite covariance".into()));
    }
    let ra = psd_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    if !tr_sqrt.is_finite() {
        return Err(RtkError::Numerical("eigendecomposition failed".into()));
    }
    let dmu = DVector::from_column_slice(&a.mu) - DVector::from_column_slice(&b.mu);
    let fd = dmu.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

/// Precomputed statistics of a reference image set.
pub fn image_stats(images: &ImageBatch, extractor: &FeatureExtractor) -> Result<GaussianStats> {
    let f = extractor.extract(images)?;
    fit_gaussian(&f, extractor.dim(images))
}

pub fn fid(a: &ImageBatch, b: &ImageBatch, extractor: &FeatureExtractor) -> Result<f64> {
    frechet_distance(&image_stats(a, extractor)?, &image_stats(b, extractor)?)
}

/// FID between clean reconstructions and the inputs.
pub fn rfid(state: &TokenizerState, data: &ImageBatch, extractor: &FeatureExtractor) -> Result<f64> {
    let rec = reconstruct(data, state, None)?;
    fid(&rec, data, extractor)
}

/// The perturbation grid pFID averages over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfidGrid {
    pub alphas: Vec<f64>,
    pub deltas_base: Vec<usize>,
    /// Codebook size the base deltas are expressed against.
    pub k_ref: usize,
}

impl Default for PfidGrid {
    fn default() -> Self {
        Self {
            alphas: vec![0.9, 0.8, 0.7, 0.6, 0.5],
            deltas_base: vec![200, 280, 360],
            k_ref: 4096,
        }
    }
}

impl PfidGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.deltas_base.is_empty() {
            return Err(invalid("pFID grid needs at least one alpha and one delta"));
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(invalid("pFID alphas must lie in [0, 1]"));
        }
        if self.deltas_base.contains(&0) || self.k_ref < 2 {
            return Err(invalid("pFID deltas must be positive and k_ref >= 2"));
        }
        Ok(())
    }

    /// Cells in evaluation (and summation) order: alphas outer, deltas inner.
    pub fn cells(&self) -> Vec<(f64, usize)> {
        self.alphas
            .iter()
            .flat_map(|&a| self.deltas_base.iter().map(move |&d| (a, d)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfidCell {
    pub alpha: f64,
    pub delta_base: usize,
    pub delta_eff: usize,
    pub fid: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfidReport {
    pub pfid: f64,
    pub cells: Vec<PfidCell>,
    /// Images evaluated per cell.
    pub samples: usize,
}

/// Perturbed FID: unweighted mean over grid cells of FID(perturbed
/// reconstructions, inputs), every image perturbed.
pub fn pfid(
    state: &TokenizerState,
    data: &ImageBatch,
    grid: &PfidGrid,
    extractor: &FeatureExtractor,
    seed: u64,
) -> Result<PfidReport> {
    grid.validate()?;
    if data.n == 0 {
        return Err(invalid("pFID needs a non-empty dataset"));
    }
    let reference = image_stats(data, extractor)?;
    let k = state.arch.codebook_size;
    let cells = grid.cells();
    let results: Vec<Result<PfidCell>> = par::map_range(cells.len(), |i| {
        let (alpha, delta_base) = cells[i];
        let delta_eff = effective_delta(delta_base, k, grid.k_ref);
        let perturb = ReconPerturbation {
            alpha,
            delta: delta_eff,
            seed: derive_seed(seed, i as u64),
        };
        let rec = reconstruct(data, state, Some(perturb))?;
        let fid = frechet_distance(&image_stats(&rec, extractor)?, &reference)?;
        Ok(PfidCell {
            alpha,
            delta_base,
            delta_eff,
            fid,
        })
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let pfid = cells.iter().map(|c| c.fid).sum::<f64>() / cells.len() as f64;
    Ok(PfidReport {
        pfid,
        cells,
        samples: data.n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    /// Biased (V-statistic) estimate of squared MMD.
    pub value: f64,
    pub bandwidth: f64,
    /// Set when the median heuristic gave zero and 1.0 was used instead.
    pub fallback: bool,
}

fn median_distance(x: &[f64], y: &[f64], d: usize) -> f64 {
    let pooled: Vec<&[f64]> = x.chunks_exact(d).chain(y.chunks_exact(d)).collect();
    let n = pooled.len();
    let mut dists: Vec<f64> = par::map_range(n, |i| {
        (i + 1..n)
            .map(|j| crate::codebook::sq_dist(pooled[i], pooled[j]).sqrt())
            .collect::<Vec<f64>>()
    })
    .concat();
    if dists.is_empty() {
        return 0.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    }
}

fn mean_kernel(a: &[f64], b: &[f64], d: usize, h: f64) -> f64 {
    let na = a.len() / d;
    let nb = b.len() / d;
    let g = 1.0 / (2.0 * h * h);
    let rows = par::map_range(na, |i| {
        let ai = &a[i * d..(i + 1) * d];
        b.chunks_exact(d)
            .map(|bj| (-crate::codebook::sq_dist(ai, bj) * g).exp())
            .sum::<f64>()
    });
    rows.iter().sum::<f64>() / (na * nb) as f64
}

/// Squared MMD with RBF kernel `exp(-||x - y||² / (2 h²))`, biased estimator.
pub fn mmd(x: &[f64], y: &[f64], d: usize, bandwidth: Bandwidth) -> Result<MmdResult> {
    if d == 0 || x.len() % d != 0 || y.len() % d != 0 {
        return Err(invalid("sample arrays are not whole rows"));
    }
    if x.is_empty() || y.is_empty() {
        return Err(RtkError::InsufficientSamples { needed: 1, got: 0 });
    }
    let (h, fallback) = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => (h, false),
        Bandwidth::Fixed(h) => return Err(invalid(format!("bandwidth must be positive, got {h}"))),
        Bandwidth::Median => {
            let m = median_distance(x, y, d);
            if m > 0.0 {
                (m, false)
            } else {
                (1.0, true)
            }
        }
    };
    let kxx = mean_kernel(x, x, d, h);
    let kyy = mean_kernel(y, y, d, h);
    let kxy = mean_kernel(x, y, d, h);
    Ok(MmdResult {
        value: (kxx + kyy - 2.0 * kxy).max(0.0),
        bandwidth: h,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn stats(mu: &[f64], sigma: &[f64]) -> GaussianStats {
        GaussianStats {
            mu: mu.to_vec(),
            sigma: sigma.to_vec(),
            n: 10,
        }
    }

    #[test]
    fn fit_gaussian_cases() {
        let g = fit_gaussian(&[0.0, 2.0], 1).unwrap();
        assert_eq!(g.mu, vec![1.0]);
        assert_eq!(g.sigma, vec![2.0]);
        let same = fit_gaussian(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2).unwrap();
        assert!(same.sigma.iter().all(|&v| v == 0.0));
        assert!(matches!(
            fit_gaussian(&[1.0, 2.0], 2),
            Err(RtkError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn frechet_closed_forms() {
        let a = stats(&[0.0], &[1.0]);
        let b = stats(&[2.0], &[4.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 5.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-12);
        let c = stats(&[1.0, 0.0], &[1.0, 0.0, 0.0, 4.0]);
        let e = stats(&[0.0, 2.0], &[9.0, 0.0, 0.0, 16.0]);
        assert!((frechet_distance(&c, &e).unwrap() - (5.0 + 8.0)).abs() < 1e-10);
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn fid_on_images() {
        let mk = |v: f64, n: usize| ImageBatch::new(4, 1, vec![v; 16 * n], vec![0; n]).unwrap();
        let mut rng = rng_from(1);
        let noisy = ImageBatch::new(4, 1, (0..16 * 20).map(|_| rng.random_range(0.0..1.0)).collect(), vec![0; 20]).unwrap();
        let ex = FeatureExtractor::DownsampledPixels { size: 2 };
        assert!(fid(&noisy, &noisy, &ex).unwrap() < 1e-8);
        assert!(fid(&mk(0.1, 5), &mk(0.9, 5), &ex).unwrap() > 0.1);
        let perm: Vec<usize> = (0..20).rev().collect();
        let f1 = fid(&noisy, &mk(0.5, 3), &ex).unwrap();
        let f2 = fid(&noisy.subset(&perm), &mk(0.5, 3), &ex).unwrap();
        assert!((f1 - f2).abs() < 1e-9);
        assert!(FeatureExtractor::DownsampledPixels { size: 3 }.extract(&noisy).is_err());
    }

    #[test]
    fn mmd_cases() {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = mmd(&x, &x, 2, Bandwidth::Median).unwrap();
        assert!(r.value < 1e-12);
        let a = vec![0.0; 10];
        let b = vec![1000.0; 10];
        let far = mmd(&a, &b, 1, Bandwidth::Fixed(1.0)).unwrap();
        assert!((far.value - 2.0).abs() < 1e-12);
        let deg = mmd(&a, &a, 1, Bandwidth::Median).unwrap();
        assert!(deg.fallback);
        assert_eq!(deg.bandwidth, 1.0);
        assert!(mmd(&[], &a, 1, Bandwidth::Median).is_err());
    }

    #[test]
    fn pfid_grid_default_has_fifteen_cells() {
        assert_eq!(PfidGrid::default().cells().len(), 15);
    }

    proptest! {
        #[test]
        fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>()) {
            let mut rng = rng_from(seed);
            let d = 4;
            let fa: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fb: Vec<f64> = (0..40).map(|_| rng.random_range(-2.0..1.5)).collect();
            let a = fit_gaussian(&fa, d).unwrap();
            let b = fit_gaussian(&fb, d).unwrap();
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-10);
        }

        #[test]
        fn mmd_nonnegative_and_permutation_invariant(seed in any::<u64>()) {
            let mut rng = rng_from(seed);
            let x: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..24).map(|_| rng.random_range(-0.5..2.0)).collect();
            let r = mmd(&x, &y, 3, Bandwidth::Median).unwrap();
            prop_assert!(r.value >= 0.0);
            let xr: Vec<f64> = x.chunks(3).rev().flatten().copied().collect();
            let yr: Vec<f64> = y.chunks(3).rev().flatten().copied().collect();
            let r2 = mmd(&xr, &yr, 3, Bandwidth::Median).unwrap();
            prop_assert!((r.value - r2.value).abs() < 1e-12);
        }
    }
}
