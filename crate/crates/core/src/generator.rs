//! Toy class-conditional autoregressive model over token grids.
//!
//! Each raster position is predicted from the previous `window` tokens, a
//! class embedding and a position embedding by a one-hidden-layer perceptron.
//! Positions before the start of the grid read a dedicated padding token.

use log::info;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codebook::{LatentGrid, NeighborTable};
use crate::error::{invalid, Result};
use crate::metrics::{mmd, Bandwidth};
use crate::nn::{Mlp, Sgd};
use crate::par;
use crate::perturbation::perturb_grid;
use crate::rng::{derive_seed, derive_tagged, rng_from, round_half_up, Rng};
use crate::tokenizer::{tokenize, ImageBatch, TokenizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorArch {
    /// Vocabulary size (codebook size).
    pub k: usize,
    /// Side of the square token grid.
    pub grid: usize,
    pub classes: usize,
    pub window: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            k: 64,
            grid: 8,
            classes: 8,
            window: 8,
            embed: 16,
            hidden: 128,
        }
    }
}

impl GeneratorArch {
    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn input_dim(&self) -> usize {
        (self.window + 2) * self.embed
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(invalid("generator window, embed and hidden must be positive"));
        }
        if self.k < 2 || self.grid == 0 || self.classes == 0 {
            return Err(invalid("generator needs K >= 2, a non-empty grid and a class"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub arch: GeneratorArch,
    /// `(K + 1) × embed`; row `K` is the padding token.
    pub token_embed: Vec<f64>,
    pub class_embed: Vec<f64>,
    pub pos_embed: Vec<f64>,
    /// `(window + 2)·embed → hidden → K`.
    pub mlp: Mlp,
}

impl GeneratorParams {
    pub fn random(arch: GeneratorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(derive_tagged(seed, "generator-init"));
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let mut table = |rows: usize| -> Vec<f64> {
            (0..rows * arch.embed).map(|_| normal.sample(&mut rng)).collect()
        };
        let token_embed = table(arch.k + 1);
        let class_embed = table(arch.classes);
        let pos_embed = table(arch.tokens());
        let mlp = Mlp::random(&[arch.input_dim(), arch.hidden, arch.k], &mut rng);
        Ok(Self {
            arch,
            token_embed,
            class_embed,
            pos_embed,
            mlp,
        })
    }

    /// All-zero parameters for `arch`.
    pub fn zeros(arch: GeneratorArch) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            token_embed: vec![0.0; (arch.k + 1) * arch.embed],
            class_embed: vec![0.0; arch.classes * arch.embed],
            pos_embed: vec![0.0; arch.tokens() * arch.embed],
            mlp: Mlp::zeros(&[arch.input_dim(), arch.hidden, arch.k]),
        })
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("arch already validated")
    }

    /// Parameter slices in fixed order: embeddings, then the MLP.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.token_embed.as_slice(),
            self.class_embed.as_slice(),
            self.pos_embed.as_slice(),
        ];
        v.extend(self.mlp.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.token_embed.as_mut_slice(),
            self.class_embed.as_mut_slice(),
            self.pos_embed.as_mut_slice(),
        ];
        v.extend(self.mlp.slices_mut());
        v
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// The `window` tokens preceding raster position `pos`, oldest first.
    fn context(&self, tokens: &[u32], pos: usize) -> Vec<usize> {
        let w = self.arch.window;
        (0..w)
            .map(|j| {
                let back = w - j;
                if pos >= back {
                    tokens[pos - back] as usize
                } else {
                    self.arch.k
                }
            })
            .collect()
    }

    fn input(&self, context: &[usize], class: u32, pos: usize) -> Vec<f64> {
        let e = self.arch.embed;
        let mut x = Vec::with_capacity(self.arch.input_dim());
        for &t in context {
            x.extend_from_slice(&self.token_embed[t * e..(t + 1) * e]);
        }
        let c = class as usize;
        x.extend_from_slice(&self.class_embed[c * e..(c + 1) * e]);
        x.extend_from_slice(&self.pos_embed[pos * e..(pos + 1) * e]);
        x
    }

    fn check_class(&self, class: u32) -> Result<()> {
        if class as usize >= self.arch.classes {
            return Err(invalid(format!(
                "class {class} out of range for {} classes",
                self.arch.classes
            )));
        }
        Ok(())
    }

    /// Next-token logits at raster position `pos` given the tokens emitted so
    /// far (`prefix.len() >= pos`; only the last `window` are read).
    pub fn logits(&self, prefix: &[u32], class: u32, pos: usize) -> Result<Vec<f64>> {
        self.check_class(class)?;
        if pos >= self.arch.tokens() || prefix.len() < pos {
            return Err(invalid("position outside grid or prefix too short"));
        }
        let ctx = self.context(prefix, pos);
        Ok(self.mlp.forward(&self.input(&ctx, class, pos), 1))
    }
}

/// Top-k / temperature sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_k: 16,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.top_k < 1 || self.top_k > k {
            return Err(invalid(format!("top_k must lie in [1, {k}], got {}", self.top_k)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature must be positive"));
        }
        Ok(())
    }
}

/// Keeps the `top_k` largest logits (ties to the smaller index), divides by
/// `temperature` and renormalizes. Zero probability outside the kept set.
pub fn top_k_probs(logits: &[f64], top_k: usize, temperature: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let kept = &order[..top_k.min(logits.len())];
    let max = logits[kept[0]];
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in kept {
        let p = ((logits[i] - max) / temperature).exp();
        probs[i] = p;
        total += p;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

/// Inverse-CDF draw over indices in ascending order.
pub fn draw(probs: &[f64], rng: &mut Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as u32;
            }
        }
    }
    last as u32
}

/// Raster decode; positions with `forced[p] = Some(t)` emit `t` without
/// consuming randomness.
fn raster_decode(
    params: &GeneratorParams,
    class: u32,
    forced: &[Option<u32>],
    sampler: &SamplerConfig,
) -> Result<Vec<u32>> {
    params.check_class(class)?;
    sampler.validate(params.arch.k)?;
    let t = params.arch.tokens();
    let mut rng = rng_from(derive_tagged(sampler.seed, "sampling"));
    let mut tokens = Vec::with_capacity(t);
    for pos in 0..t {
        let next = match forced[pos] {
            Some(tok) => tok,
            None => {
                let logits = params.logits(&tokens, class, pos)?;
                draw(&top_k_probs(&logits, sampler.top_k, sampler.temperature), &mut rng)
            }
        };
        tokens.push(next);
    }
    Ok(tokens)
}

pub fn sample_grid(params: &GeneratorParams, class: u32, sampler: &SamplerConfig) -> Result<LatentGrid> {
    let g = params.arch.grid;
    let tokens = raster_decode(params, class, &vec![None; g * g], sampler)?;
    LatentGrid::new(g, g, tokens)
}

/// A partially teacher-forced generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedGrid {
    pub grid: LatentGrid,
    /// True where the reference token was used.
    pub forced: Vec<bool>,
}

impl MixedGrid {
    pub fn forced_count(&self) -> usize {
        self.forced.iter().filter(|&&f| f).count()
    }
}

/// Generates a grid where a uniformly random set of `round(sigma · H·W)`
/// positions, fixed before decoding, takes the reference token.
pub fn teacher_forced_mix(
    params: &GeneratorParams,
    reference: &LatentGrid,
    class: u32,
    sigma: f64,
    sampler: &SamplerConfig,
) -> Result<MixedGrid> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid(format!("sigma must lie in [0, 1], got {sigma}")));
    }
    let g = params.arch.grid;
    if reference.h != g || reference.w != g {
        return Err(invalid("reference grid shape does not match generator"));
    }
    reference.check_range(params.arch.k)?;
    let t = g * g;
    let count = round_half_up(sigma * t as f64).min(t);
    let mut rng = rng_from(derive_tagged(sampler.seed, "forced-positions"));
    let mut forced = vec![false; t];
    for p in index::sample(&mut rng, t, count) {
        forced[p] = true;
    }
    let plan: Vec<Option<u32>> = (0..t)
        .map(|p| forced[p].then_some(reference.indices[p]))
        .collect();
    let tokens = raster_decode(params, class, &plan, sampler)?;
    Ok(MixedGrid {
        grid: LatentGrid::new(g, g, tokens)?,
        forced,
    })
}

/// SDEdit analogue of the preservation ratio: `1 - t / T`.
pub fn sdedit_sigma(t: f64, total: f64) -> Result<f64> {
    if !(total > 0.0) {
        return Err(invalid("total diffusion steps must be positive"));
    }
    if !(0.0..=total).contains(&t) {
        return Err(invalid(format!("start step {t} outside [0, {total}]")));
    }
    Ok(1.0 - t / total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    /// Grids per minibatch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            learning_rate: 0.2,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Mean next-token cross-entropy over every position of `grids`, and its
/// gradient.
pub fn cross_entropy_gradients(
    params: &GeneratorParams,
    grids: &[(LatentGrid, u32)],
) -> Result<(f64, GeneratorParams)> {
    let a = params.arch;
    let t = a.tokens();
    for (g, c) in grids {
        params.check_class(*c)?;
        if g.len() != t {
            return Err(invalid("grid shape does not match generator"));
        }
        g.check_range(a.k)?;
    }
    let total = (grids.len() * t) as f64;
    let per = par::map_slice(grids, |(grid, class)| {
        let mut grad = params.zeros_like();
        let mut xs = Vec::with_capacity(t * a.input_dim());
        let mut ctxs = Vec::with_capacity(t);
        for pos in 0..t {
            let ctx = params.context(&grid.indices, pos);
            xs.extend(params.input(&ctx, *class, pos));
            ctxs.push(ctx);
        }
        let cache = params.mlp.forward_cached(&xs, t);
        let logits = cache.output();
        let mut loss = 0.0;
        let mut d_out = vec![0.0; t * a.k];
        for pos in 0..t {
            let row = &logits[pos * a.k..(pos + 1) * a.k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
            let target = grid.indices[pos] as usize;
            loss += z.ln() + max - row[target];
            for j in 0..a.k {
                let p = (row[j] - max).exp() / z;
                d_out[pos * a.k + j] = (p - (j == target) as u8 as f64) / total;
            }
        }
        let dx = params.mlp.backward(&cache, &d_out, &mut grad.mlp);
        let e = a.embed;
        let dim = a.input_dim();
        for pos in 0..t {
            let row = &dx[pos * dim..(pos + 1) * dim];
            for (slot, &tok) in ctxs[pos].iter().enumerate() {
                for j in 0..e {
                    grad.token_embed[tok * e + j] += row[slot * e + j];
                }
            }
            let c = *class as usize;
            for j in 0..e {
                grad.class_embed[c * e + j] += row[a.window * e + j];
                grad.pos_embed[pos * e + j] += row[(a.window + 1) * e + j];
            }
        }
        (loss, grad)
    });
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in per {
        loss += l;
        grad.add_assign(&g);
    }
    Ok((loss / total, grad))
}

#[derive(Debug, Clone)]
pub struct GeneratorOutcome {
    pub params: GeneratorParams,
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Minimizes next-token cross-entropy with momentum SGD.
pub fn train_generator(
    grids: &[(LatentGrid, u32)],
    arch: GeneratorArch,
    config: &GeneratorTrainConfig,
) -> Result<GeneratorOutcome> {
    if grids.is_empty() {
        return Err(invalid("no training grids"));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(invalid("generator batch_size and learning_rate must be positive"));
    }
    let mut params = GeneratorParams::random(arch, config.seed)?;
    let mut opt = Sgd::new(config.learning_rate, config.momentum, 0.0);
    let flags = vec![false; params.slices().len()];
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = rng_from(derive_seed(derive_tagged(config.seed, "generator-epoch"), epoch as u64));
        let order = index::sample(&mut rng, grids.len(), grids.len()).into_vec();
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(LatentGrid, u32)> = chunk.iter().map(|&i| grids[i].clone()).collect();
            let (loss, grad) = cross_entropy_gradients(&params, &batch)?;
            if !loss.is_finite() {
                return Err(crate::RtkError::TrainingDiverged { step: epoch, loss });
            }
            opt.step(params.slices_mut(), grad.slices(), &flags);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        info!("generator epoch {epoch}: cross-entropy {mean:.4}");
        epoch_loss.push(mean);
    }
    Ok(GeneratorOutcome { params, epoch_loss })
}

/// One class-balanced batch of generations: grid `i` uses class
/// `labels[i]` and a seed derived from `(sampler.seed, i)`.
pub fn sample_many(params: &GeneratorParams, labels: &[u32], sampler: &SamplerConfig) -> Result<Vec<LatentGrid>> {
    par::map_range(labels.len(), |i| {
        sample_grid(params, labels[i], &sampler.with_seed(derive_seed(sampler.seed, i as u64)))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdRow {
    pub alpha: f64,
    pub mmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmdTable {
    pub delta: usize,
    pub bandwidth: f64,
    pub rows: Vec<MmdRow>,
}

/// MMD between generated latents and alpha-perturbed reconstruction latents,
/// both embedded as flattened codeword sequences. The kernel bandwidth is the
/// median heuristic on generated vs clean latents, shared by every row.
pub fn latent_distribution_probe(
    gen: &GeneratorParams,
    state: &TokenizerState,
    data: &ImageBatch,
    alphas: &[f64],
    delta: usize,
    sampler: &SamplerConfig,
) -> Result<MmdTable> {
    let cb = &state.params.codebook;
    let generated = sample_many(gen, &data.labels, sampler)?;
    let clean = tokenize(data, state)?;
    let embed = |gs: &[LatentGrid]| -> Vec<f64> { gs.iter().flat_map(|g| cb.lookup(g)).collect() };
    let d = state.arch.tokens() * cb.dim();
    let gen_x = embed(&generated);
    let bandwidth = mmd(&gen_x, &embed(&clean), d, Bandwidth::Median)?.bandwidth;
    let table = NeighborTable::build(cb);
    let mut rows = Vec::with_capacity(alphas.len());
    for (ai, &alpha) in alphas.iter().enumerate() {
        let perturbed: Vec<Result<LatentGrid>> = par::map_range(clean.len(), |i| {
            let seed = derive_seed(derive_seed(derive_tagged(sampler.seed, "probe-perturbation"), ai as u64), i as u64);
            perturb_grid(&clean[i], &table, alpha, delta, seed).map(|p| p.grid)
        });
        let perturbed = perturbed.into_iter().collect::<Result<Vec<_>>>()?;
        let value = mmd(&gen_x, &embed(&perturbed), d, Bandwidth::Fixed(bandwidth))?.value;
        rows.push(MmdRow { alpha, mmd: value });
    }
    Ok(MmdTable { delta, bandwidth, rows })
}
