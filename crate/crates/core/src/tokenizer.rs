//! A toy patch tokenizer: per-patch MLP encoder, vector quantization with a
//! straight-through estimator, per-patch MLP decoder.
//!
//! Training order per batch is fixed: encode, quantize, VQ/commitment loss on
//! the clean tokens, then latent perturbation, then decode and reconstruction
//! loss. The semantic proxy loss regresses the continuous latents onto a
//! frozen random projection of each raw patch.

use log::{debug, info};
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codebook::{kmeans, Codebook, LatentGrid, NeighborTable};
use crate::error::{invalid, Result, RtkError};
use crate::nn::{mlp_decay_flags, Mlp, MlpCache, Sgd};
use crate::par;
use crate::perturbation::{
    effective_delta, perturb_batch, perturb_grid, AnnealSchedule, PerturbSpec, PerturbedGrid,
};
use crate::rng::{derive_seed, derive_tagged, rng_from};

/// Images, `n × size × size × channels`, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub n: usize,
    pub size: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u32>,
}

impl ImageBatch {
    pub fn new(size: usize, channels: usize, pixels: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        let per = size * size * channels;
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(invalid(format!(
                "{} pixel values do not form {} images of {size}x{size}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            n: labels.len(),
            size,
            channels,
            pixels,
            labels,
        })
    }

    pub fn image_len(&self) -> usize {
        self.size * self.size * self.channels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let l = self.image_len();
        &self.pixels[i * l..(i + 1) * l]
    }

    pub fn subset(&self, idx: &[usize]) -> ImageBatch {
        let mut pixels = Vec::with_capacity(idx.len() * self.image_len());
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        ImageBatch {
            n: idx.len(),
            size: self.size,
            channels: self.channels,
            pixels,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, n: usize) -> ImageBatch {
        self.subset(&(0..n.min(self.n)).collect::<Vec<_>>())
    }
}

/// Tokenizer architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerArch {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden: usize,
    /// Hidden layers in each of encoder and decoder (0 makes both affine).
    pub hidden_layers: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub teacher_seed: u64,
}

impl Default for TokenizerArch {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            hidden: 64,
            hidden_layers: 2,
            latent_dim: 8,
            codebook_size: 64,
            teacher_seed: 0x5EED_7EAC,
        }
    }
}

impl TokenizerArch {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 || self.image_size == 0 {
            return Err(invalid("image_size must be a positive multiple of patch_size"));
        }
        if self.channels == 0 || self.latent_dim == 0 || self.codebook_size < 2 {
            return Err(invalid("channels, latent_dim must be positive and K >= 2"));
        }
        if self.hidden_layers > 0 && self.hidden == 0 {
            return Err(invalid("hidden width must be positive"));
        }
        Ok(())
    }

    fn stack(&self, input: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        d.extend(std::iter::repeat(self.hidden).take(self.hidden_layers));
        d.push(output);
        d
    }

    pub fn encoder_dims(&self) -> Vec<usize> {
        self.stack(self.patch_dim(), self.latent_dim)
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        self.stack(self.latent_dim, self.patch_dim())
    }

    fn check_images(&self, images: &ImageBatch) -> Result<()> {
        if images.size != self.image_size || images.channels != self.channels {
            return Err(invalid(format!(
                "images are {}x{}x{}, tokenizer expects {}x{}x{}",
                images.size, images.size, images.channels, self.image_size, self.image_size, self.channels
            )));
        }
        Ok(())
    }
}

/// Splits one image into `grid²` flattened patches, raster order.
pub fn patchify(arch: &TokenizerArch, image: &[f64]) -> Vec<f64> {
    let (p, c, g, s) = (arch.patch_size, arch.channels, arch.grid(), arch.image_size);
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let row = (gy * p + py) * s + gx * p;
                out.extend_from_slice(&image[row * c..(row + p) * c]);
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(arch: &TokenizerArch, patches: &[f64]) -> Vec<f64> {
    let (p, c, g, s) = (arch.patch_size, arch.channels, arch.grid(), arch.image_size);
    let mut out = vec![0.0; s * s * c];
    let mut k = 0;
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..p {
                let row = (gy * p + py) * s + gx * p;
                out[row * c..(row + p) * c].copy_from_slice(&patches[k..k + p * c]);
                k += p * c;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
}

/// A tokenizer with everything needed to resume or evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerState {
    pub arch: TokenizerArch,
    pub params: TokenizerParams,
    /// Frozen `latent_dim × patch_dim` projection used as semantic teacher.
    pub teacher: Vec<f64>,
    pub step: usize,
    pub post_trained: bool,
}

pub(crate) fn teacher_projection(arch: &TokenizerArch) -> Vec<f64> {
    let mut rng = rng_from(arch.teacher_seed);
    let normal = Normal::new(0.0, (1.0 / arch.patch_dim() as f64).sqrt()).expect("valid std");
    (0..arch.latent_dim * arch.patch_dim())
        .map(|_| normal.sample(&mut rng))
        .collect()
}

impl TokenizerState {
    /// Random encoder/decoder and a random Gaussian codebook.
    pub fn random(arch: TokenizerArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(derive_tagged(seed, "tokenizer-init"));
        let encoder = Mlp::random(&arch.encoder_dims(), &mut rng);
        let decoder = Mlp::random(&arch.decoder_dims(), &mut rng);
        let normal = Normal::new(0.0, 0.5).expect("valid std");
        let cb: Vec<f64> = (0..arch.codebook_size * arch.latent_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Self {
            arch,
            params: TokenizerParams {
                encoder,
                decoder,
                codebook: Codebook::new(cb, arch.codebook_size, arch.latent_dim)?,
            },
            teacher: teacher_projection(&arch),
            step: 0,
            post_trained: false,
        })
    }

    /// Random networks plus a codebook seeded by k-means over the initial
    /// encoder outputs of (a sample of) `data`.
    pub fn init_from_data(arch: TokenizerArch, data: &ImageBatch, seed: u64) -> Result<Self> {
        let mut state = Self::random(arch, seed)?;
        arch.check_images(data)?;
        let take = data.n.min(64);
        if take == 0 {
            return Ok(state);
        }
        let mut rng = rng_from(derive_tagged(seed, "codebook-init-sample"));
        let idx = index::sample(&mut rng, data.n, take).into_vec();
        let latents = encode(&data.subset(&idx), &state)?;
        let k = arch.codebook_size;
        let c = arch.latent_dim;
        let points = latents.len() / c;
        let mut entries = if points >= k {
            kmeans(&latents, c, k, 20, derive_tagged(seed, "codebook-init"))?.centroids
        } else {
            // every latent becomes a codeword; the rest are jittered copies
            let normal = Normal::new(0.0, 0.05).expect("valid std");
            let mut e = latents.clone();
            for i in points..k {
                let src = (i % points) * c;
                for j in 0..c {
                    e.push(latents[src + j] + normal.sample(&mut rng));
                }
            }
            e
        };
        dedupe_rows(&mut entries, arch.latent_dim);
        state.params.codebook = Codebook::new(entries, k, arch.latent_dim)?;
        Ok(state)
    }

    pub fn grid_side(&self) -> usize {
        self.arch.grid()
    }
}

/// Nudges exact-duplicate rows apart by a tiny index-dependent offset.
fn dedupe_rows(entries: &mut [f64], dim: usize) {
    let k = entries.len() / dim;
    for i in 1..k {
        loop {
            let dup = (0..i).any(|j| entries[j * dim..(j + 1) * dim] == entries[i * dim..(i + 1) * dim]);
            if !dup {
                break;
            }
            for (c, v) in entries[i * dim..(i + 1) * dim].iter_mut().enumerate() {
                *v += 1e-6 * ((i * 31 + c * 7) % 13 + 1) as f64;
            }
        }
    }
}

/// Continuous latents `n × grid × grid × latent_dim`.
pub fn encode(images: &ImageBatch, state: &TokenizerState) -> Result<Vec<f64>> {
    state.arch.check_images(images)?;
    let t = state.arch.tokens();
    let per = par::map_range(images.n, |i| {
        let patches = patchify(&state.arch, images.image(i));
        state.params.encoder.forward(&patches, t)
    });
    Ok(per.concat())
}

/// Raw (unclamped) pixels decoded from codeword vectors `n × grid² × latent_dim`.
pub fn decode(codewords: &[f64], state: &TokenizerState) -> Result<Vec<f64>> {
    let a = &state.arch;
    let per_image = a.tokens() * a.latent_dim;
    if codewords.len() % per_image != 0 {
        return Err(invalid(format!(
            "{} latent values are not a whole number of {}x{}x{} grids",
            codewords.len(),
            a.grid(),
            a.grid(),
            a.latent_dim
        )));
    }
    let n = codewords.len() / per_image;
    let per = par::map_range(n, |i| {
        let out = state
            .params
            .decoder
            .forward(&codewords[i * per_image..(i + 1) * per_image], a.tokens());
        unpatchify(a, &out)
    });
    Ok(per.concat())
}

/// Decodes grids of indices and clamps to `[0, 1]`.
pub fn decode_grids(grids: &[LatentGrid], state: &TokenizerState) -> Result<ImageBatch> {
    let cb = &state.params.codebook;
    let mut codewords = Vec::with_capacity(grids.len() * state.arch.tokens() * cb.dim());
    for g in grids {
        if g.h != state.arch.grid() || g.w != state.arch.grid() {
            return Err(invalid("grid shape does not match tokenizer"));
        }
        g.check_range(cb.k())?;
        codewords.extend(cb.lookup(g));
    }
    let mut pixels = decode(&codewords, state)?;
    pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ImageBatch::new(
        state.arch.image_size,
        state.arch.channels,
        pixels,
        vec![0; grids.len()],
    )
}

/// Encodes and quantizes every image.
pub fn tokenize(images: &ImageBatch, state: &TokenizerState) -> Result<Vec<LatentGrid>> {
    let z = encode(images, state)?;
    let g = state.arch.grid();
    let per = state.arch.tokens() * state.arch.latent_dim;
    (0..images.n)
        .map(|i| state.params.codebook.quantize_grid(&z[i * per..(i + 1) * per], g, g))
        .collect()
}

/// Weights of the composite training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_vq: f64,
    /// Inner weight of the commitment term inside the VQ loss.
    pub commitment: f64,
    pub lambda_sem: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_vq: 1.0,
            commitment: 0.25,
            lambda_sem: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_rec, self.lambda_vq, self.commitment, self.lambda_sem];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Only `beta` is read during training; per-step alpha and delta come
    /// from `anneal`.
    #[serde(skip)]
    pub perturb: PerturbSpec,
    #[serde(skip)]
    pub anneal: AnnealSchedule,
    /// Reference codebook size that `anneal.delta0` is expressed against.
    pub delta_ref_k: usize,
    pub loss: LossWeights,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            perturb: PerturbSpec::none(),
            anneal: AnnealSchedule::default(),
            delta_ref_k: 4096,
            loss: LossWeights::default(),
            log_every: 250,
        }
    }
}

impl TrainConfig {
    /// Perturbation-trained setup: `beta` of each batch perturbed, starting at
    /// `(alpha0, delta0)` and annealing linearly to `end_factor` of both.
    pub fn with_perturbation(mut self, beta: f64, alpha0: f64, delta0: usize, end_factor: f64) -> Self {
        self.perturb = PerturbSpec {
            alpha: alpha0,
            beta,
            delta: delta0,
        };
        self.anneal = AnnealSchedule {
            alpha0,
            delta0,
            end_factor,
            // the last training step reaches the terminal values
            total_steps: self.steps.saturating_sub(1).max(1),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.perturb.beta) {
            return Err(invalid("beta must lie in [0, 1]"));
        }
        self.anneal.validate()?;
        self.loss.validate()
    }

    /// Perturbation applied at `step` for a `k`-entry codebook.
    pub fn perturbation_at(&self, step: usize, k: usize) -> PerturbSpec {
        let (alpha, delta) = self.anneal.at(step);
        PerturbSpec {
            alpha,
            beta: self.perturb.beta,
            delta: effective_delta(delta, k, self.delta_ref_k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub total: f64,
    pub rec: f64,
    pub vq: f64,
    pub sem: f64,
}

/// Gradients of the composite loss plus the intermediate gradients that the
/// straight-through contract is stated in terms of.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Vec<f64>,
    /// `dL/dx_q` at the decoder input, `n × tokens × latent_dim`.
    pub decoder_input: Vec<f64>,
    /// `dL/dz` at the encoder output, same layout.
    pub encoder_output: Vec<f64>,
    /// Perturbation masks, one per image.
    pub masks: Vec<Vec<bool>>,
}

struct ImageForward {
    patches: Vec<f64>,
    enc: MlpCache,
    grid: LatentGrid,
}

/// Forward and backward pass over `batch` with the perturbation that step
/// `step` of `config` prescribes. Parameters are not modified.
pub fn compute_gradients(
    batch: &ImageBatch,
    state: &TokenizerState,
    step: usize,
    config: &TrainConfig,
) -> Result<(Losses, Gradients)> {
    let a = &state.arch;
    a.check_images(batch)?;
    let (t, c, d) = (a.tokens(), a.latent_dim, a.patch_dim());
    let n = batch.n;
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let cb = &state.params.codebook;
    let w = &config.loss;
    let g = a.grid();

    let fwd: Vec<ImageForward> = par::map_range(n, |i| {
        let patches = patchify(a, batch.image(i));
        let enc = state.params.encoder.forward_cached(&patches, t);
        let z = enc.output();
        let indices = (0..t)
            .map(|p| cb.nearest_unchecked(&z[p * c..(p + 1) * c]) as u32)
            .collect();
        ImageForward {
            patches,
            enc,
            grid: LatentGrid { h: g, w: g, indices },
        }
    });
    if fwd.iter().any(|f| f.enc.output().iter().any(|v| !v.is_finite())) {
        return Err(RtkError::TrainingDiverged { step, loss: f64::NAN });
    }

    // perturbation strictly after the VQ/commitment loss inputs are fixed
    let spec = config.perturbation_at(step, cb.k());
    let clean: Vec<LatentGrid> = fwd.iter().map(|f| f.grid.clone()).collect();
    let perturbed: Vec<PerturbedGrid> = if spec.beta > 0.0 && spec.alpha > 0.0 {
        let table = NeighborTable::build(cb);
        perturb_batch(&clean, &table, &spec, derive_seed(config.seed, step as u64))?.grids
    } else {
        clean.into_iter().map(PerturbedGrid::untouched).collect()
    };

    let n_tok = (n * t) as f64;
    let n_pix = (n * a.image_len()) as f64;

    struct ImageBackward {
        enc: Mlp,
        dec: Mlp,
        codebook: Vec<f64>,
        d_xq: Vec<f64>,
        d_z: Vec<f64>,
        rec: f64,
        vq: f64,
        sem: f64,
    }

    let back: Vec<ImageBackward> = par::map_range(n, |i| {
        let f = &fwd[i];
        let pg = &perturbed[i];
        let z = f.enc.output();
        let xq = cb.lookup(&pg.grid);
        let dec_cache = state.params.decoder.forward_cached(&xq, t);
        let out = dec_cache.output();
        let target = &f.patches;
        let mut rec = 0.0;
        let mut d_out = vec![0.0; out.len()];
        for j in 0..out.len() {
            let diff = out[j] - target[j];
            rec += diff * diff;
            d_out[j] = w.lambda_rec * 2.0 * diff / n_pix;
        }
        let mut dec_grad = state.params.decoder.zeros_like();
        let d_xq = state.params.decoder.backward(&dec_cache, &d_out, &mut dec_grad);

        let mut d_z = vec![0.0; t * c];
        let mut cb_grad = vec![0.0; cb.k() * c];
        let mut vq = 0.0;
        let mut sem = 0.0;
        for p in 0..t {
            // straight-through: perturbed tokens carry no gradient to the encoder
            if !pg.mask[p] {
                d_z[p * c..(p + 1) * c].copy_from_slice(&d_xq[p * c..(p + 1) * c]);
            }
            let k = f.grid.indices[p] as usize;
            let e = cb.codeword(k);
            let patch = &f.patches[p * d..(p + 1) * d];
            for j in 0..c {
                let zj = z[p * c + j];
                let diff = zj - e[j];
                vq += (1.0 + w.commitment) * diff * diff;
                d_z[p * c + j] += w.lambda_vq * w.commitment * 2.0 * diff / n_tok;
                cb_grad[k * c + j] -= w.lambda_vq * 2.0 * diff / n_tok;
                let teach: f64 = state.teacher[j * d..(j + 1) * d]
                    .iter()
                    .zip(patch)
                    .map(|(x, y)| x * y)
                    .sum();
                let sd = zj - teach;
                sem += sd * sd;
                d_z[p * c + j] += w.lambda_sem * 2.0 * sd / (n_tok * c as f64);
            }
        }
        let mut enc_grad = state.params.encoder.zeros_like();
        state.params.encoder.backward(&f.enc, &d_z, &mut enc_grad);
        ImageBackward {
            enc: enc_grad,
            dec: dec_grad,
            codebook: cb_grad,
            d_xq,
            d_z,
            rec,
            vq,
            sem,
        }
    });

    let mut grads = Gradients {
        encoder: state.params.encoder.zeros_like(),
        decoder: state.params.decoder.zeros_like(),
        codebook: vec![0.0; cb.k() * c],
        decoder_input: Vec::with_capacity(n * t * c),
        encoder_output: Vec::with_capacity(n * t * c),
        masks: perturbed.iter().map(|p| p.mask.clone()).collect(),
    };
    let (mut rec, mut vq, mut sem) = (0.0, 0.0, 0.0);
    for b in back {
        grads.encoder.add_assign(&b.enc);
        grads.decoder.add_assign(&b.dec);
        grads.codebook.iter_mut().zip(&b.codebook).for_each(|(x, y)| *x += y);
        grads.decoder_input.extend(b.d_xq);
        grads.encoder_output.extend(b.d_z);
        rec += b.rec;
        vq += b.vq;
        sem += b.sem;
    }
    let rec = rec / n_pix;
    let vq = vq / n_tok;
    let sem = sem / (n_tok * c as f64);
    let total = w.lambda_rec * rec + w.lambda_vq * vq + w.lambda_sem * sem;
    if !total.is_finite() {
        return Err(RtkError::TrainingDiverged { step, loss: total });
    }
    Ok((Losses { total, rec, vq, sem }, grads))
}

impl TokenizerArch {
    fn image_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Optimizer state carried across training steps.
#[derive(Debug, Clone)]
pub struct TokenizerOptimizer {
    encoder: Sgd,
    decoder: Sgd,
    codebook: Sgd,
}

impl TokenizerOptimizer {
    pub fn new(config: &TrainConfig) -> Self {
        let mk = |wd| Sgd::new(config.learning_rate, config.momentum, wd);
        Self {
            encoder: mk(config.weight_decay),
            decoder: mk(config.weight_decay),
            codebook: mk(0.0),
        }
    }

    pub fn apply(&mut self, state: &mut TokenizerState, grads: &Gradients) -> Result<()> {
        let p = &mut state.params;
        let flags = mlp_decay_flags(&p.encoder);
        self.encoder.step(p.encoder.slices_mut(), grads.encoder.slices(), &flags);
        let flags = mlp_decay_flags(&p.decoder);
        self.decoder.step(p.decoder.slices_mut(), grads.decoder.slices(), &flags);
        let opt = &mut self.codebook;
        p.codebook
            .update_with(|e| opt.step(vec![e], vec![&grads.codebook], &[false]))?;
        Ok(())
    }

    /// Updates only the decoder, leaving encoder and codebook untouched.
    pub fn apply_decoder(&mut self, state: &mut TokenizerState, decoder_grad: &Mlp) {
        let flags = mlp_decay_flags(&state.params.decoder);
        self.decoder
            .step(state.params.decoder.slices_mut(), decoder_grad.slices(), &flags);
    }
}

/// One optimization step; returns the losses measured before the update.
pub fn training_step(
    batch: &ImageBatch,
    state: &mut TokenizerState,
    optimizer: &mut TokenizerOptimizer,
    step: usize,
    config: &TrainConfig,
) -> Result<(Losses, Gradients)> {
    let (losses, grads) = compute_gradients(batch, state, step, config)?;
    optimizer.apply(state, &grads)?;
    if !state.params.encoder.is_finite() || !state.params.decoder.is_finite() {
        return Err(RtkError::TrainingDiverged { step, loss: losses.total });
    }
    state.step += 1;
    Ok((losses, grads))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub losses: Losses,
    pub alpha: f64,
    pub delta: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TokenizerState,
    pub log: Vec<LogEntry>,
}

/// Draws the minibatch for `step`, uniformly without replacement.
pub fn minibatch(data: &ImageBatch, batch_size: usize, seed: u64, step: usize) -> ImageBatch {
    let mut rng = rng_from(derive_seed(derive_tagged(seed, "minibatch"), step as u64));
    let idx = index::sample(&mut rng, data.n, batch_size.min(data.n)).into_vec();
    data.subset(&idx)
}

/// Initializes from `data` and runs `config.steps` training steps.
pub fn train(data: &ImageBatch, arch: TokenizerArch, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let state = TokenizerState::init_from_data(arch, data, config.seed)?;
    train_from(data, state, config)
}

/// Continues training an existing state.
pub fn train_from(data: &ImageBatch, mut state: TokenizerState, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.n == 0 {
        return Err(invalid("empty training set"));
    }
    let mut opt = TokenizerOptimizer::new(config);
    let mut log = Vec::new();
    for step in 0..config.steps {
        let batch = minibatch(data, config.batch_size, config.seed, step);
        let (losses, _) = training_step(&batch, &mut state, &mut opt, step, config)?;
        let last = step + 1 == config.steps;
        if config.log_every > 0 && (step % config.log_every == 0 || last) {
            let spec = config.perturbation_at(step, state.arch.codebook_size);
            debug!(
                "step {step}: total {:.5} rec {:.5} vq {:.5} sem {:.5}",
                losses.total, losses.rec, losses.vq, losses.sem
            );
            log.push(LogEntry {
                step,
                losses,
                alpha: if spec.beta > 0.0 { spec.alpha } else { 0.0 },
                delta: spec.delta,
            });
        }
    }
    if let Some(l) = log.last() {
        info!("tokenizer trained {} steps, final rec loss {:.5}", config.steps, l.losses.rec);
    }
    Ok(TrainOutcome { state, log })
}

/// Optional perturbation for [`reconstruct`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconPerturbation {
    pub alpha: f64,
    pub delta: usize,
    pub seed: u64,
}

/// Encode, quantize, optionally perturb every grid, decode, clamp.
pub fn reconstruct(
    images: &ImageBatch,
    state: &TokenizerState,
    perturb: Option<ReconPerturbation>,
) -> Result<ImageBatch> {
    let grids = tokenize(images, state)?;
    let grids = match perturb {
        Some(p) if p.alpha > 0.0 => {
            let table = NeighborTable::build(&state.params.codebook);
            let out: Vec<Result<LatentGrid>> = par::map_range(grids.len(), |i| {
                perturb_grid(&grids[i], &table, p.alpha, p.delta, derive_seed(p.seed, i as u64)).map(|g| g.grid)
            });
            out.into_iter().collect::<Result<Vec<_>>>()?
        }
        Some(p) => {
            if p.delta < 1 || p.delta >= state.arch.codebook_size {
                return Err(invalid("delta out of range"));
            }
            grids
        }
        None => grids,
    };
    let mut out = decode_grids(&grids, state)?;
    out.labels = images.labels.clone();
    Ok(out)
}

/// Mean squared error between two equally-shaped image sets.
pub fn mse(a: &ImageBatch, b: &ImageBatch) -> f64 {
    let n = a.pixels.len().max(1) as f64;
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
}

/// Mean and (population) standard deviation over `trials` of
/// `||I'' - I'|| / ||Delta||`, where `Delta` is the change in codeword vectors.
pub fn lipschitz_probe(
    image: &ImageBatch,
    state: &TokenizerState,
    alpha: f64,
    delta: usize,
    trials: usize,
    seed: u64,
) -> Result<LipschitzEstimate> {
    if image.n != 1 {
        return Err(invalid("lipschitz probe takes exactly one image"));
    }
    if trials == 0 {
        return Err(invalid("trials must be positive"));
    }
    let grid = tokenize(image, state)?.remove(0);
    let table = NeighborTable::build(&state.params.codebook);
    let cb = &state.params.codebook;
    let clean_cw = cb.lookup(&grid);
    let clean = decode_grids(std::slice::from_ref(&grid), state)?;
    let ratios: Vec<Result<f64>> = par::map_range(trials, |t| {
        let pg = perturb_grid(&grid, &table, alpha, delta, derive_seed(seed, t as u64))?;
        let dz = cb
            .lookup(&pg.grid)
            .iter()
            .zip(&clean_cw)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if dz == 0.0 {
            return Err(RtkError::UndefinedProbe(
                "perturbation changed no tokens (alpha rounds to zero)".into(),
            ));
        }
        let out = decode_grids(std::slice::from_ref(&pg.grid), state)?;
        let di = out
            .pixels
            .iter()
            .zip(&clean.pixels)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(di / dz)
    });
    let ratios = ratios.into_iter().collect::<Result<Vec<f64>>>()?;
    let n = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(LipschitzEstimate {
        mean,
        std: var.sqrt(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    pub(crate) fn micro_arch() -> TokenizerArch {
        TokenizerArch {
            image_size: 4,
            channels: 1,
            patch_size: 2,
            hidden: 3,
            hidden_layers: 1,
            latent_dim: 2,
            codebook_size: 5,
            teacher_seed: 9,
        }
    }

    pub(crate) fn random_images(arch: &TokenizerArch, n: usize, seed: u64) -> ImageBatch {
        let mut rng = rng_from(seed);
        let len = n * arch.image_size * arch.image_size * arch.channels;
        ImageBatch::new(
            arch.image_size,
            arch.channels,
            (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
            vec![0; n],
        )
        .unwrap()
    }

    #[test]
    fn patchify_roundtrip() {
        let arch = TokenizerArch { image_size: 8, channels: 3, patch_size: 4, ..Default::default() };
        let img = random_images(&arch, 1, 1);
        let p = patchify(&arch, img.image(0));
        assert_eq!(unpatchify(&arch, &p), img.pixels);
        // first patch starts with the top-left pixel, second row of the patch
        // starts one image row down
        assert_eq!(&p[..3], &img.pixels[..3]);
        assert_eq!(&p[12..15], &img.pixels[8 * 3..8 * 3 + 3]);
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let arch = micro_arch();
        let mut s = TokenizerState::random(arch, 0).unwrap();
        s.params.encoder = Mlp::zeros(&arch.encoder_dims());
        let z = encode(&random_images(&arch, 2, 3), &s).unwrap();
        assert_eq!(z.len(), 2 * 4 * 2);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_encoder_is_patch_projection() {
        let arch = TokenizerArch { hidden_layers: 0, ..micro_arch() };
        let mut s = TokenizerState::random(arch, 0).unwrap();
        let w = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0];
        s.params.encoder.layers[0].w = w;
        s.params.encoder.layers[0].b = vec![0.0, 1.0];
        let img = ImageBatch::new(4, 1, (0..16).map(|v| v as f64 / 16.0).collect(), vec![0]).unwrap();
        let z = encode(&img, &s).unwrap();
        // patch 0 = pixels (0,1,4,5)/16
        assert!((z[0] - 0.0).abs() < 1e-15);
        assert!((z[1] - (1.0 + 0.5 * (1.0 + 4.0) / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_decoder_outputs_biases() {
        let arch = micro_arch();
        let mut s = TokenizerState::random(arch, 0).unwrap();
        s.params.decoder = Mlp::zeros(&arch.decoder_dims());
        s.params.decoder.layers[1].b = vec![0.1, 0.2, 0.3, 0.4];
        let out = decode(&vec![0.7; 4 * 2], &s).unwrap();
        assert_eq!(&out[..2], &[0.1, 0.2]);
        assert!(decode(&[0.0; 3], &s).is_err());
    }

    #[test]
    fn untrained_roundtrip_is_finite() {
        let s = TokenizerState::random(TokenizerArch::default(), 1).unwrap();
        let a = s.arch;
        let imgs = random_images(&a, 2, 2);
        let z = encode(&imgs, &s).unwrap();
        assert_eq!(z.len(), 2 * a.tokens() * a.latent_dim);
        let out = decode(&z, &s).unwrap();
        assert_eq!(out.len(), imgs.pixels.len());
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(encode(&random_images(&micro_arch(), 1, 0), &s).is_err());
    }

    #[test]
    fn degenerate_weights_are_plain_autoencoder_step() {
        let arch = micro_arch();
        let s = TokenizerState::random(arch, 4).unwrap();
        let imgs = random_images(&arch, 3, 5);
        let cfg = TrainConfig {
            loss: LossWeights { lambda_rec: 1.0, lambda_vq: 0.0, commitment: 0.25, lambda_sem: 0.0 },
            ..Default::default()
        };
        let (l, g) = compute_gradients(&imgs, &s, 0, &cfg).unwrap();
        assert_eq!(l.total, l.rec);
        assert!(g.codebook.iter().all(|&v| v == 0.0));
        let grids = tokenize(&imgs, &s).unwrap();
        let raw = decode(
            &grids.iter().flat_map(|g| s.params.codebook.lookup(g)).collect::<Vec<_>>(),
            &s,
        )
        .unwrap();
        let want = raw.iter().zip(&imgs.pixels).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / raw.len() as f64;
        assert!((l.rec - want).abs() < 1e-14);
    }

    #[test]
    fn vq_loss_ignores_perturbation() {
        let arch = TokenizerArch { codebook_size: 8, ..micro_arch() };
        let s = TokenizerState::random(arch, 4).unwrap();
        let imgs = random_images(&arch, 4, 6);
        let clean = TrainConfig::default();
        let noisy = TrainConfig::default().with_perturbation(1.0, 1.0, 4096, 1.0);
        let (l0, _) = compute_gradients(&imgs, &s, 0, &clean).unwrap();
        for seed in 0..4 {
            let cfg = TrainConfig { seed, ..noisy.clone() };
            let (l1, g1) = compute_gradients(&imgs, &s, 0, &cfg).unwrap();
            assert_eq!(l1.vq, l0.vq);
            assert_eq!(l1.sem, l0.sem);
            assert!(g1.masks.iter().all(|m| m.iter().all(|&b| b)));
        }
    }

    #[test]
    fn steps_zero_returns_initialization() {
        let arch = micro_arch();
        let imgs = random_images(&arch, 8, 1);
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let out = train(&imgs, arch, &cfg).unwrap();
        assert_eq!(out.state, TokenizerState::init_from_data(arch, &imgs, cfg.seed).unwrap());
    }

    #[test]
    fn overfits_a_single_image() {
        let arch = TokenizerArch { image_size: 8, hidden: 16, codebook_size: 16, ..TokenizerArch::default() };
        let img = random_images(&arch, 1, 3);
        let cfg = TrainConfig {
            steps: 3000,
            batch_size: 1,
            learning_rate: 0.1,
            loss: LossWeights { lambda_sem: 0.0, ..Default::default() },
            ..Default::default()
        };
        let out = train(&img, arch, &cfg).unwrap();
        let rec = reconstruct(&img, &out.state, None).unwrap();
        assert!(mse(&rec, &img) < 1e-3, "mse {}", mse(&rec, &img));
    }

    #[test]
    fn reconstruct_perturbation_paths() {
        let arch = micro_arch();
        let s = TokenizerState::random(arch, 2).unwrap();
        let imgs = random_images(&arch, 3, 9);
        let plain = reconstruct(&imgs, &s, None).unwrap();
        let zero = reconstruct(&imgs, &s, Some(ReconPerturbation { alpha: 0.0, delta: 2, seed: 1 })).unwrap();
        assert_eq!(plain, zero);
        let a = reconstruct(&imgs, &s, Some(ReconPerturbation { alpha: 1.0, delta: 1, seed: 1 })).unwrap();
        let b = reconstruct(&imgs, &s, Some(ReconPerturbation { alpha: 1.0, delta: 1, seed: 99 })).unwrap();
        assert_eq!(a, b);
        assert!(plain.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn lipschitz_edge_cases() {
        let arch = micro_arch();
        let mut s = TokenizerState::random(arch, 2).unwrap();
        let img = random_images(&arch, 1, 9);
        let est = lipschitz_probe(&img, &s, 0.5, 2, 1, 0).unwrap();
        assert_eq!(est.std, 0.0);
        assert!(matches!(
            lipschitz_probe(&img, &s, 0.0, 2, 3, 0),
            Err(RtkError::UndefinedProbe(_))
        ));
        s.params.decoder = Mlp::zeros(&arch.decoder_dims());
        s.params.decoder.layers[1].b = vec![0.5; 4];
        assert_eq!(lipschitz_probe(&img, &s, 0.5, 2, 4, 0).unwrap().mean, 0.0);
    }
}
