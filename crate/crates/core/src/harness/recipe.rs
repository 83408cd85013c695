//! Canned experiments: perturbation ablation, anneal sweep and the
//! preservation-ratio sweep with decoder post-training.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RtkError};
use crate::generator::{
    latent_distribution_probe, train_generator, GeneratorOutcome, GeneratorParams, SamplerConfig,
};
use crate::harness::checkpoint::{save_generator, save_tokenizer};
use crate::harness::config::{PerturbationConfig, RunConfig};
use crate::harness::dataset::{generate_dataset, save_dataset, Dataset};
use crate::harness::report::{emit_report, Report, RunResult};
use crate::metrics::{pfid, FeatureExtractor};
use crate::perturbation::effective_delta;
use crate::posttrain::{build_pairs, generation_fid, posttrain_decoder};
use crate::rng::derive_tagged;
use crate::tokenizer::{mse, reconstruct, tokenize, train, ImageBatch, TokenizerState};

/// Beta used by the perturbed arm when the config leaves it at zero.
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenerateData,
    TrainTokenizer,
    TrainGenerator,
    Posttrain,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenerateData => "generate-data",
            Stage::TrainTokenizer => "train-tokenizer",
            Stage::TrainGenerator => "train-generator",
            Stage::Posttrain => "posttrain",
            Stage::Evaluate => "evaluate",
        }
    }

    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::GenerateData => &[],
            Stage::TrainTokenizer => &[Stage::GenerateData],
            Stage::TrainGenerator => &[Stage::TrainTokenizer],
            Stage::Posttrain => &[Stage::TrainGenerator],
            Stage::Evaluate => &[Stage::TrainTokenizer],
        }
    }
}

/// Runs `f`, tagging any error with the stage it came from.
pub fn in_stage<T>(stage: Stage, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        tagged @ RtkError::Stage { .. } => tagged,
        other => other.in_stage(stage.name()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecipeName {
    AblationPerturbation,
    AnnealSweep,
    SigmaSweep,
}

impl RecipeName {
    pub const ALL: [RecipeName; 3] = [
        RecipeName::AblationPerturbation,
        RecipeName::AnnealSweep,
        RecipeName::SigmaSweep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecipeName::AblationPerturbation => "ablation-perturbation",
            RecipeName::AnnealSweep => "anneal-sweep",
            RecipeName::SigmaSweep => "sigma-sweep",
        }
    }

    pub fn stages(self) -> Vec<Stage> {
        match self {
            RecipeName::AblationPerturbation | RecipeName::AnnealSweep => {
                vec![Stage::GenerateData, Stage::TrainTokenizer, Stage::Evaluate]
            }
            RecipeName::SigmaSweep => vec![
                Stage::GenerateData,
                Stage::TrainTokenizer,
                Stage::TrainGenerator,
                Stage::Posttrain,
                Stage::Evaluate,
            ],
        }
    }
}

impl fmt::Display for RecipeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecipeName {
    type Err = RtkError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown recipe `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecipe {
    pub name: RecipeName,
    pub stages: Vec<Stage>,
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

impl ExperimentRecipe {
    pub fn new(name: RecipeName, config: RunConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            name,
            stages: name.stages(),
            config,
            out_dir: out_dir.into(),
        }
    }

    /// Every stage must come after the stages it depends on.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            for dep in s.requires() {
                if !self.stages[..i].contains(dep) {
                    return Err(invalid(format!(
                        "stage `{}` needs `{}` to run before it",
                        s.name(),
                        dep.name()
                    )));
                }
            }
        }
        self.config.validate()
    }
}

/// The perturbed arm's perturbation settings.
pub fn perturbed_arm(config: &RunConfig) -> PerturbationConfig {
    let p = &config.perturbation;
    PerturbationConfig {
        beta: if p.beta > 0.0 { p.beta } else { DEFAULT_BETA },
        ..p.clone()
    }
}

/// `config` with its perturbation section replaced.
pub fn with_perturbation(config: &RunConfig, perturbation: PerturbationConfig) -> RunConfig {
    RunConfig {
        perturbation,
        ..config.clone()
    }
}

pub fn train_tokenizer(config: &RunConfig, data: &Dataset) -> Result<TokenizerState> {
    Ok(train(&data.train, config.tokenizer, &config.train_config())?.state)
}

/// rFID, pFID and reconstruction MSE on the evaluation split.
pub fn evaluate_tokenizer(
    label: &str,
    state: &TokenizerState,
    eval: &ImageBatch,
    config: &RunConfig,
    extractor: &FeatureExtractor,
) -> Result<RunResult> {
    let rec = reconstruct(eval, state, None)?;
    let rfid = crate::metrics::fid(&rec, eval, extractor)?;
    let p = pfid(state, eval, &config.eval.pfid, extractor, config.eval.seed)?;
    let mut run = RunResult::new(label)
        .metric("mse", mse(&rec, eval))
        .metric("rfid", rfid)
        .metric("pfid", p.pfid);
    run.pfid_cells = p.cells;
    Ok(run)
}

fn tokenizer_arm(
    label: &str,
    config: &RunConfig,
    data: &Dataset,
    extractor: &FeatureExtractor,
    out_dir: &Path,
) -> Result<RunResult> {
    info!("training tokenizer `{label}`");
    let state = in_stage(Stage::TrainTokenizer, || {
        let state = train_tokenizer(config, data)?;
        save_tokenizer(&state, &out_dir.join(format!("{label}.tok")))?;
        Ok(state)
    })?;
    in_stage(Stage::Evaluate, || {
        evaluate_tokenizer(label, &state, &data.eval, config, extractor)
    })
}

pub fn train_generator_on(state: &TokenizerState, data: &ImageBatch, config: &RunConfig) -> Result<GeneratorOutcome> {
    let grids = tokenize(data, state)?;
    let pairs: Vec<_> = grids.into_iter().zip(data.labels.iter().copied()).collect();
    train_generator(&pairs, config.generator, &config.generator_train)
}

/// Outcome of sweeping the preservation ratio.
#[derive(Debug, Clone)]
pub struct SigmaSweep {
    /// `(sigma, selection FID)` per swept value.
    pub selection: Vec<(f64, f64)>,
    pub pre_selection_fid: f64,
    pub best_sigma: f64,
    /// Generation FID proxy on held-out references, before and after
    /// post-training at `best_sigma`.
    pub pre_fid: f64,
    pub post_fid: f64,
    pub post_state: TokenizerState,
    /// Encoder and codebook of every post-trained decoder are bitwise
    /// identical to the input tokenizer's.
    pub frozen: bool,
}

/// Bitwise equality of encoder weights and codebook entries.
pub fn encoder_and_codebook_frozen(a: &TokenizerState, b: &TokenizerState) -> bool {
    let bits = |s: &TokenizerState| -> Vec<u64> {
        s.params
            .encoder
            .slices()
            .into_iter()
            .flatten()
            .chain(s.params.codebook.entries())
            .map(|v| v.to_bits())
            .collect()
    };
    bits(a) == bits(b)
}

/// Post-trains the decoder at every swept sigma, picks the sigma with the
/// lowest generation FID against a slice of the training split, then
/// measures that decoder against the evaluation split with fresh samples.
pub fn sigma_sweep(
    config: &RunConfig,
    data: &Dataset,
    state: &TokenizerState,
    gen: &GeneratorParams,
    extractor: &FeatureExtractor,
) -> Result<SigmaSweep> {
    if config.sweep.sigmas.is_empty() {
        return Err(invalid("sigma sweep needs at least one sigma"));
    }
    let selection_ref = data.train.take(data.eval.n.min(data.train.n));
    let selection_sampler = SamplerConfig {
        seed: derive_tagged(config.sampler.seed, "sigma-selection"),
        ..config.sampler
    };
    let final_sampler = SamplerConfig {
        seed: derive_tagged(config.sampler.seed, "sigma-final"),
        ..config.sampler
    };
    let pre_selection_fid = generation_fid(gen, state, &selection_ref, &selection_sampler, extractor)?;
    let mut selection = Vec::new();
    let mut best: Option<(f64, f64, TokenizerState)> = None;
    let mut frozen = true;
    for &sigma in &config.sweep.sigmas {
        let pt = crate::posttrain::PosttrainConfig {
            sigma,
            ..config.posttrain_config()
        };
        let pairs = build_pairs(&data.train, state, gen, &pt)?;
        let (post, _) = posttrain_decoder(&pairs, state, &pt, config.train.learning_rate)?;
        frozen &= encoder_and_codebook_frozen(state, &post);
        let f = generation_fid(gen, &post, &selection_ref, &selection_sampler, extractor)?;
        info!("sigma {sigma}: selection FID {f:.4} (before post-training {pre_selection_fid:.4})");
        selection.push((sigma, f));
        if best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((sigma, f, post));
        }
    }
    let (best_sigma, _, post_state) = best.expect("at least one sigma");
    let pre_fid = generation_fid(gen, state, &data.eval, &final_sampler, extractor)?;
    let post_fid = generation_fid(gen, &post_state, &data.eval, &final_sampler, extractor)?;
    Ok(SigmaSweep {
        selection,
        pre_selection_fid,
        best_sigma,
        pre_fid,
        post_fid,
        post_state,
        frozen,
    })
}

fn label_for_end_factor(f: f64) -> String {
    if f == 1.0 {
        "no-anneal".into()
    } else {
        format!("anneal-to-{f}")
    }
}

/// Runs every stage of `recipe`, writes checkpoints and reports under its
/// output directory and returns the reports.
pub fn run_recipe(recipe: &ExperimentRecipe) -> Result<Vec<Report>> {
    recipe.validate()?;
    let cfg = &recipe.config;
    let out = recipe.out_dir.as_path();
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let extractor = in_stage(Stage::Evaluate, || cfg.eval.features.build())?;
    let data = in_stage(Stage::GenerateData, || {
        let d = generate_dataset(&cfg.dataset)?;
        save_dataset(&d, &out.join("data"))?;
        Ok(d)
    })?;
    let mut report = Report::new(recipe.name.as_str(), cfg);
    match recipe.name {
        RecipeName::AblationPerturbation => {
            let baseline = with_perturbation(
                cfg,
                PerturbationConfig {
                    beta: 0.0,
                    ..cfg.perturbation.clone()
                },
            );
            report
                .runs
                .push(tokenizer_arm("baseline", &baseline, &data, &extractor, out)?);
            let perturbed = with_perturbation(cfg, perturbed_arm(cfg));
            report
                .runs
                .push(tokenizer_arm("perturbed", &perturbed, &data, &extractor, out)?);
        }
        RecipeName::AnnealSweep => {
            for &end_factor in &cfg.sweep.end_factors {
                let arm = with_perturbation(
                    cfg,
                    PerturbationConfig {
                        end_factor,
                        ..perturbed_arm(cfg)
                    },
                );
                let label = label_for_end_factor(end_factor);
                let run = tokenizer_arm(&label, &arm, &data, &extractor, out)?.metric("end_factor", end_factor);
                report.runs.push(run);
            }
        }
        RecipeName::SigmaSweep => {
            let arm = with_perturbation(cfg, perturbed_arm(cfg));
            let state = in_stage(Stage::TrainTokenizer, || {
                let s = train_tokenizer(&arm, &data)?;
                save_tokenizer(&s, &out.join("tokenizer.tok"))?;
                Ok(s)
            })?;
            let gen = in_stage(Stage::TrainGenerator, || {
                let g = train_generator_on(&state, &data.train, cfg)?;
                save_generator(&g.params, &out.join("generator.gen"))?;
                Ok(g)
            })?;
            let sweep = in_stage(Stage::Posttrain, || {
                let s = sigma_sweep(cfg, &data, &state, &gen.params, &extractor)?;
                save_tokenizer(&s.post_state, &out.join("posttrained.tok"))?;
                Ok(s)
            })?;
            let mut pre = RunResult::new("pre-posttrain")
                .metric("gfid", sweep.pre_fid)
                .metric("gfid_selection", sweep.pre_selection_fid)
                .metric("generator_final_ce", *gen.epoch_loss.last().unwrap_or(&f64::NAN));
            in_stage(Stage::Evaluate, || {
                let delta = effective_delta(
                    cfg.probe.mmd_delta_base,
                    cfg.tokenizer.codebook_size,
                    cfg.eval.pfid.k_ref,
                );
                let table =
                    latent_distribution_probe(&gen.params, &state, &data.eval, &cfg.probe.mmd_alphas, delta, &cfg.sampler)?;
                pre.mmd_rows = table.rows;
                pre.metrics.insert("mmd_bandwidth".into(), table.bandwidth);
                Ok(())
            })?;
            report.runs.push(pre);
            for &(sigma, f) in &sweep.selection {
                report.runs.push(
                    RunResult::new(format!("sigma-{sigma}"))
                        .metric("sigma", sigma)
                        .metric("gfid_selection", f),
                );
            }
            report.runs.push(
                RunResult::new("post-posttrain")
                    .metric("gfid", sweep.post_fid)
                    .metric("sigma", sweep.best_sigma)
                    .metric("frozen", if sweep.frozen { 1.0 } else { 0.0 }),
            );
        }
    }
    in_stage(Stage::Evaluate, || emit_report(&report, out))?;
    Ok(vec![report])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for r in RecipeName::ALL {
            assert_eq!(r.as_str().parse::<RecipeName>().unwrap(), r);
        }
        assert!("ablation".parse::<RecipeName>().is_err());
    }

    #[test]
    fn stage_order_is_checked() {
        let mut r = ExperimentRecipe::new(RecipeName::SigmaSweep, RunConfig::default(), "unused");
        assert!(r.validate().is_ok());
        r.stages.swap(2, 3);
        let err = r.validate().unwrap_err().to_string();
        assert!(err.contains("posttrain"), "{err}");
    }

    #[test]
    fn errors_carry_their_stage() {
        let e = in_stage(Stage::TrainGenerator, || -> Result<()> { Err(invalid("boom")) }).unwrap_err();
        assert_eq!(e.to_string(), "stage `train-generator` failed: invalid argument: boom");
        let nested = in_stage(Stage::Evaluate, || in_stage(Stage::Posttrain, || -> Result<()> { Err(invalid("x")) }));
        assert!(nested.unwrap_err().to_string().starts_with("stage `posttrain`"));
    }

    #[test]
    fn perturbed_arm_defaults_beta() {
        let cfg = RunConfig::default();
        assert_eq!(perturbed_arm(&cfg).beta, DEFAULT_BETA);
        let mut c = cfg.clone();
        c.perturbation.beta = 0.3;
        assert_eq!(perturbed_arm(&c).beta, 0.3);
        assert_eq!(label_for_end_factor(1.0), "no-anneal");
        assert_eq!(label_for_end_factor(0.5), "anneal-to-0.5");
    }
}
