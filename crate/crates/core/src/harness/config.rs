//! Run configuration: one TOML file whose sections map onto the typed
//! configs of each stage.
//!
//! ```toml
//! [run]
//! seed = 7
//!
//! [dataset]
//! samples_per_class = 250
//!
//! [tokenizer]
//! codebook_size = 64
//!
//! [train]
//! steps = 3000
//! learning_rate = 0.05
//!
//! [train.loss]
//! lambda_sem = 0.1
//!
//! [perturbation]
//! beta = 0.1
//! alpha0 = 1.0
//! delta0 = 100
//! end_factor = 0.5
//! ```
//!
//! Every key is optional; absent keys take their defaults. Unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::generator::{GeneratorArch, GeneratorTrainConfig, SamplerConfig};
use crate::harness::checkpoint::load_tokenizer;
use crate::harness::dataset::ShapeDatasetConfig;
use crate::metrics::{FeatureExtractor, PfidGrid};
use crate::posttrain::PosttrainConfig;
use crate::rng::derive_tagged;
use crate::tokenizer::{TokenizerArch, TrainConfig};

/// Latent perturbation during tokenizer training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationConfig {
    /// Fraction of each batch perturbed; 0 trains the baseline.
    pub beta: f64,
    pub alpha0: f64,
    /// Initial strength, expressed against `delta_ref_k` codewords.
    pub delta0: usize,
    /// Terminal multiplier of alpha and delta; 1 disables annealing.
    pub end_factor: f64,
    pub delta_ref_k: usize,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            alpha0: 1.0,
            delta0: 100,
            end_factor: 0.5,
            delta_ref_k: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    DownsampledPixels,
    RandomProjection,
    TrainedProbe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    /// Pooled resolution for the pixel-based extractors.
    pub size: usize,
    pub dim: usize,
    pub seed: u64,
    /// Tokenizer checkpoint for `trained-probe`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        match FeatureExtractor::default() {
            FeatureExtractor::RandomProjection { size, dim, seed } => Self {
                kind: FeatureKind::RandomProjection,
                size,
                dim,
                seed,
                checkpoint: None,
            },
            _ => unreachable!("default extractor is a random projection"),
        }
    }
}

impl FeatureConfig {
    pub fn build(&self) -> Result<FeatureExtractor> {
        Ok(match self.kind {
            FeatureKind::DownsampledPixels => FeatureExtractor::DownsampledPixels { size: self.size },
            FeatureKind::RandomProjection => FeatureExtractor::RandomProjection {
                size: self.size,
                dim: self.dim,
                seed: self.seed,
            },
            FeatureKind::TrainedProbe => {
                let path = self
                    .checkpoint
                    .as_ref()
                    .ok_or_else(|| invalid("trained-probe features need a checkpoint path"))?;
                FeatureExtractor::TrainedProbe(Box::new(load_tokenizer(path)?))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub pfid: PfidGrid,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            pfid: PfidGrid::default(),
            features: FeatureConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Alphas of the latent-distribution MMD table.
    pub mmd_alphas: Vec<f64>,
    pub mmd_delta_base: usize,
    pub lipschitz_alpha: f64,
    pub lipschitz_delta_base: usize,
    pub lipschitz_trials: usize,
    /// Images the Lipschitz probe averages over.
    pub lipschitz_images: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mmd_alphas: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            mmd_delta_base: 280,
            lipschitz_alpha: 0.1,
            lipschitz_delta_base: 200,
            lipschitz_trials: 16,
            lipschitz_images: 8,
        }
    }
}

/// Values swept by the recipes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub sigmas: Vec<f64>,
    pub end_factors: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            end_factors: vec![1.0, 0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// When set, every stage seed is derived from this one.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub dataset: ShapeDatasetConfig,
    pub tokenizer: TokenizerArch,
    pub train: TrainConfig,
    pub perturbation: PerturbationConfig,
    pub eval: EvalConfig,
    pub generator: GeneratorArch,
    pub generator_train: GeneratorTrainConfig,
    pub sampler: SamplerConfig,
    pub posttrain: PosttrainConfig,
    pub probe: ProbeConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text)?;
        if let Some(seed) = config.run.seed {
            config.set_seed(seed);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Derives every stage seed from `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = Some(seed);
        self.dataset.seed = derive_tagged(seed, "dataset");
        self.train.seed = derive_tagged(seed, "train");
        self.eval.seed = derive_tagged(seed, "eval");
        self.generator_train.seed = derive_tagged(seed, "generator");
        self.sampler.seed = derive_tagged(seed, "sampler");
        self.posttrain.seed = derive_tagged(seed, "posttrain");
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.tokenizer;
        t.validate()?;
        self.dataset.validate(t.patch_size)?;
        if self.dataset.image_size != t.image_size {
            return Err(invalid(format!(
                "dataset image_size {} differs from tokenizer image_size {}",
                self.dataset.image_size, t.image_size
            )));
        }
        let g = &self.generator;
        g.validate()?;
        if g.k != t.codebook_size || g.grid != t.grid() {
            return Err(invalid(format!(
                "generator expects K = {} on a {}×{} grid; tokenizer has K = {} on {}×{}",
                g.k,
                g.grid,
                g.grid,
                t.codebook_size,
                t.grid(),
                t.grid()
            )));
        }
        if g.classes < self.dataset.num_classes {
            return Err(invalid("generator has fewer classes than the dataset"));
        }
        self.train_config().validate()?;
        self.sampler.validate(g.k)?;
        self.posttrain.validate()?;
        self.eval.pfid.validate()?;
        let p = &self.perturbation;
        if !(0.0..=1.0).contains(&p.beta) || p.delta_ref_k < 2 {
            return Err(invalid("perturbation beta must lie in [0, 1] and delta_ref_k >= 2"));
        }
        Ok(())
    }

    /// Tokenizer training config with the perturbation section folded in.
    pub fn train_config(&self) -> TrainConfig {
        let p = &self.perturbation;
        let train = TrainConfig {
            delta_ref_k: p.delta_ref_k,
            ..self.train.clone()
        };
        if p.beta > 0.0 {
            train.with_perturbation(p.beta, p.alpha0, p.delta0, p.end_factor)
        } else {
            train
        }
    }

    /// Post-training config using the shared sampler.
    pub fn posttrain_config(&self) -> PosttrainConfig {
        PosttrainConfig {
            sampler: self.sampler,
            ..self.posttrain.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train_config().perturb.beta, 0.0);
    }

    #[test]
    fn sections_map_onto_typed_configs() {
        let c = RunConfig::from_toml(
            "[train]\nsteps = 10\n[train.loss]\nlambda_sem = 0.0\n\
             [perturbation]\nbeta = 0.1\nend_factor = 0.5\n[posttrain]\nsigma = 0.6\n\
             [eval.pfid]\nalphas = [0.5]\n",
        )
        .unwrap();
        let t = c.train_config();
        assert_eq!(t.steps, 10);
        assert_eq!(t.loss.lambda_sem, 0.0);
        assert_eq!(t.perturb.beta, 0.1);
        assert_eq!(t.anneal.at(0), (1.0, 100));
        assert_eq!(t.anneal.at(t.anneal.total_steps), (0.5, 50));
        assert_eq!(c.posttrain.sigma, 0.6);
        assert_eq!(c.eval.pfid.alphas, vec![0.5]);
    }

    #[test]
    fn rejects_unknown_keys_and_inconsistent_shapes() {
        assert!(RunConfig::from_toml("[train]\nstepz = 1\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
        assert!(RunConfig::from_toml("[tokenizer]\ncodebook_size = 32\n").is_err());
        assert!(RunConfig::from_toml("[tokenizer]\ncodebook_size = 32\n[generator]\nk = 32\n").is_ok());
    }

    #[test]
    fn paper_scale_shape_is_expressible() {
        let text = "[dataset]\nimage_size = 256\n\
                    [tokenizer]\nimage_size = 256\npatch_size = 16\ncodebook_size = 4096\n\
                    [generator]\nk = 4096\ngrid = 16\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.tokenizer.grid(), 16);
    }

    #[test]
    fn run_seed_reaches_every_stage() {
        let c = RunConfig::from_toml("[run]\nseed = 5\n").unwrap();
        let seeds = [
            c.dataset.seed,
            c.train.seed,
            c.eval.seed,
            c.generator_train.seed,
            c.sampler.seed,
            c.posttrain.seed,
        ];
        for (i, a) in seeds.iter().enumerate() {
            for b in &seeds[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let d = RunConfig::from_toml("[run]\nseed = 6\n").unwrap();
        assert_ne!(c.train.seed, d.train.seed);
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = RunConfig::default();
        c.set_seed(11);
        c.perturbation.beta = 0.1;
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn trained_probe_needs_checkpoint() {
        let f = FeatureConfig {
            kind: FeatureKind::TrainedProbe,
            ..Default::default()
        };
        assert!(f.build().is_err());
    }
}
