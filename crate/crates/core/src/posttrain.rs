//! Decoder-only post-training on partially teacher-forced generations.
//!
//! Each real image is tokenized, then the generator re-decodes its grid with a
//! fraction `sigma` of positions forced to the true tokens. The decoder is
//! fine-tuned to map these mixed grids back to the real image; encoder and
//! codebook stay frozen.

use log::info;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::codebook::LatentGrid;
use crate::error::{invalid, Result, RtkError};
use crate::generator::{sample_many, teacher_forced_mix, GeneratorParams, MixedGrid, SamplerConfig};
use crate::metrics::{fid, FeatureExtractor};
use crate::nn::Sgd;
use crate::par;
use crate::rng::{derive_seed, derive_tagged, rng_from};
use crate::tokenizer::{decode_grids, patchify, tokenize, ImageBatch, TokenizerState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosttrainConfig {
    /// Preservation ratio: share of positions forced to the true token.
    pub sigma: f64,
    pub pair_count: usize,
    /// Defaults to half the tokenizer learning rate when absent.
    pub learning_rate: Option<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Decode each mixed grid and re-encode it instead of pairing the grid directly.
    pub reencode: bool,
    /// Supplied by the run config's shared sampler section.
    #[serde(skip)]
    pub sampler: SamplerConfig,
}

impl Default for PosttrainConfig {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            pair_count: 1024,
            learning_rate: None,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 500,
            batch_size: 32,
            seed: 0,
            reencode: false,
            sampler: SamplerConfig::default(),
        }
    }
}

impl PosttrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(invalid(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if self.pair_count == 0 || self.batch_size == 0 {
            return Err(invalid("pair_count and batch_size must be positive"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(invalid("learning_rate must be positive"));
            }
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, tokenizer_lr: f64) -> f64 {
        self.learning_rate.unwrap_or(tokenizer_lr * 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosttrainPair {
    pub mixed: MixedGrid,
    /// Real image pixels, `size × size × channels`.
    pub target: Vec<f64>,
    pub class: u32,
}

/// Indices of the images used for pairs: a seeded permutation, cycled when
/// more pairs than images are requested.
fn pair_sources(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_from(derive_tagged(seed, "pair-sources"));
    let perm = index::sample(&mut rng, n, n).into_vec();
    (0..count).map(|i| perm[i % n]).collect()
}

pub fn build_pairs(
    data: &ImageBatch,
    state: &TokenizerState,
    gen: &GeneratorParams,
    config: &PosttrainConfig,
) -> Result<Vec<PosttrainPair>> {
    config.validate()?;
    if data.n == 0 {
        return Err(invalid("no images to pair"));
    }
    let sources = pair_sources(data.n, config.pair_count, config.seed);
    let images = data.subset(&sources);
    let references = tokenize(&images, state)?;
    let sampler_root = derive_tagged(config.seed, "pair-sampling");
    let mixed: Vec<Result<MixedGrid>> = par::map_range(images.n, |i| {
        let sampler = config.sampler.with_seed(derive_seed(sampler_root, i as u64));
        teacher_forced_mix(gen, &references[i], images.labels[i], config.sigma, &sampler)
    });
    let mut mixed = mixed.into_iter().collect::<Result<Vec<_>>>()?;
    if config.reencode {
        let grids: Vec<LatentGrid> = mixed.iter().map(|m| m.grid.clone()).collect();
        let decoded = decode_grids(&grids, state)?;
        for (m, g) in mixed.iter_mut().zip(tokenize(&decoded, state)?) {
            m.grid = g;
        }
    }
    Ok(mixed
        .into_iter()
        .enumerate()
        .map(|(i, m)| PosttrainPair {
            mixed: m,
            target: images.image(i).to_vec(),
            class: images.labels[i],
        })
        .collect())
}

/// Mean squared reconstruction error of `pairs` under the current decoder,
/// and its gradient wrt the decoder parameters.
pub fn decoder_loss(pairs: &[PosttrainPair], state: &TokenizerState) -> Result<(f64, crate::nn::Mlp)> {
    let a = &state.arch;
    let t = a.tokens();
    let cb = &state.params.codebook;
    let n_pix = (pairs.len() * a.image_size * a.image_size * a.channels) as f64;
    let per = par::map_slice(pairs, |p| {
        let xq = cb.lookup(&p.mixed.grid);
        let cache = state.params.decoder.forward_cached(&xq, t);
        let target = patchify(a, &p.target);
        let out = cache.output();
        let mut loss = 0.0;
        let d_out: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(o, y)| {
                loss += (o - y) * (o - y);
                2.0 * (o - y) / n_pix
            })
            .collect();
        let mut g = state.params.decoder.zeros_like();
        state.params.decoder.backward(&cache, &d_out, &mut g);
        (loss, g)
    });
    let mut grad = state.params.decoder.zeros_like();
    let mut loss = 0.0;
    for (l, g) in per {
        loss += l;
        grad.add_assign(&g);
    }
    Ok((loss / n_pix, grad))
}

/// Fine-tunes only the decoder on `pairs`.
pub fn posttrain_decoder(
    pairs: &[PosttrainPair],
    state: &TokenizerState,
    config: &PosttrainConfig,
    tokenizer_lr: f64,
) -> Result<(TokenizerState, Vec<f64>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(invalid("post-training needs at least one pair"));
    }
    let mut state = state.clone();
    if config.steps == 0 {
        return Ok((state, Vec::new()));
    }
    let mut opt = Sgd::new(config.learning_rate_for(tokenizer_lr), config.momentum, config.weight_decay);
    let flags = crate::nn::mlp_decay_flags(&state.params.decoder);
    let mut losses = Vec::with_capacity(config.steps);
    let root = derive_tagged(config.seed, "posttrain-batches");
    for step in 0..config.steps {
        let mut rng = rng_from(derive_seed(root, step as u64));
        let idx = index::sample(&mut rng, pairs.len(), config.batch_size.min(pairs.len()));
        let batch: Vec<PosttrainPair> = idx.iter().map(|i| pairs[i].clone()).collect();
        let (loss, grad) = decoder_loss(&batch, &state)?;
        if !loss.is_finite() {
            return Err(RtkError::TrainingDiverged { step, loss });
        }
        opt.step(state.params.decoder.slices_mut(), grad.slices(), &flags);
        losses.push(loss);
    }
    info!(
        "post-trained decoder for {} steps, final loss {:.5}",
        config.steps,
        losses.last().copied().unwrap_or(f64::NAN)
    );
    state.post_trained = true;
    Ok((state, losses))
}

/// Generation FID proxy: decode one free generation per reference label and
/// compare against the reference images.
pub fn generation_fid(
    gen: &GeneratorParams,
    state: &TokenizerState,
    reference: &ImageBatch,
    sampler: &SamplerConfig,
    extractor: &FeatureExtractor,
) -> Result<f64> {
    let grids = sample_many(gen, &reference.labels, sampler)?;
    let images = decode_grids(&grids, state)?;
    fid(&images, reference, extractor)
}
