//! `rtk`: command-line front end for the tokenizer laboratory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rtk_core::generator::{latent_distribution_probe, sample_many};
use rtk_core::harness::checkpoint::{load_generator, load_tokenizer, save_generator, save_tokenizer};
use rtk_core::harness::config::RunConfig;
use rtk_core::harness::dataset::{generate_dataset, load_dataset, save_dataset, Dataset};
use rtk_core::harness::recipe::{run_recipe, train_generator_on, ExperimentRecipe, RecipeName};
use rtk_core::harness::report::{compare_reports, emit_report, read_report, Report, RunResult};
use rtk_core::metrics::pfid;
use rtk_core::perturbation::effective_delta;
use rtk_core::posttrain::{build_pairs, decoder_loss, posttrain_decoder};
use rtk_core::rng::derive_seed;
use rtk_core::tokenizer::{lipschitz_probe, train};

#[derive(Parser)]
#[command(name = "rtk", version, about = "Robust discrete image tokenizers at desk scale")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "rtk-out")]
    out: PathBuf,
    /// Single-threaded execution everywhere.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Args)]
struct Inputs {
    /// Dataset directory (default: <out>/data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Tokenizer checkpoint (default: <out>/tokenizer.tok).
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    /// Generator checkpoint (default: <out>/generator.gen).
    #[arg(long)]
    generator: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shape dataset.
    GenData,
    /// Train a tokenizer (perturbation settings come from the config).
    TrainTokenizer(Inputs),
    /// Reconstruction FID on the evaluation split.
    EvalRfid(Inputs),
    /// Perturbed FID over the configured alpha-delta grid.
    EvalPfid(Inputs),
    /// Train the autoregressive generator on tokenized training images.
    TrainGenerator(Inputs),
    /// Draw token grids from the generator.
    Sample {
        #[command(flatten)]
        inputs: Inputs,
        /// Grids per class.
        #[arg(long, default_value_t = 4)]
        per_class: usize,
    },
    /// Decoder post-training on teacher-forced generations.
    Posttrain {
        #[command(flatten)]
        inputs: Inputs,
        /// Preservation ratio; overrides the config.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// MMD between generated and perturbed latents across alphas.
    ProbeMmd(Inputs),
    /// Decoder Lipschitz estimate under latent perturbation.
    ProbeLipschitz(Inputs),
    /// Print a report, or compare two reports with matching fingerprints.
    Report { left: PathBuf, right: Option<PathBuf> },
    /// Run a canned experiment.
    RunRecipe {
        #[arg(value_parser = parse_recipe)]
        name: RecipeName,
    },
}

fn parse_recipe(s: &str) -> std::result::Result<RecipeName, String> {
    s.parse().map_err(|e: rtk_core::RtkError| e.to_string())
}

struct Ctx {
    config: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn data_dir(&self, i: &Inputs) -> PathBuf {
        i.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn tokenizer_path(&self, i: &Inputs) -> PathBuf {
        i.tokenizer.clone().unwrap_or_else(|| self.out.join("tokenizer.tok"))
    }

    fn generator_path(&self, i: &Inputs) -> PathBuf {
        i.generator.clone().unwrap_or_else(|| self.out.join("generator.gen"))
    }

    fn dataset(&self, i: &Inputs) -> Result<Dataset> {
        let dir = self.data_dir(i);
        load_dataset(&dir).with_context(|| format!("loading dataset from {} (run `rtk gen-data` first)", dir.display()))
    }

    fn emit(&self, report: &Report) -> Result<()> {
        let files = emit_report(report, &self.out)?;
        println!("report written to {}", files.json.display());
        Ok(())
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

fn print_run(run: &RunResult) {
    for (k, v) in &run.metrics {
        println!("{:<12} {k:<18} {v:.6}", run.label);
    }
}

fn lipschitz_report(ctx: &Ctx, i: &Inputs) -> Result<Report> {
    let cfg = &ctx.config;
    let data = ctx.dataset(i)?;
    let state = load_tokenizer(&ctx.tokenizer_path(i))?;
    let p = &cfg.probe;
    let delta = effective_delta(p.lipschitz_delta_base, state.arch.codebook_size, cfg.eval.pfid.k_ref);
    let mut report = Report::new("probe-lipschitz", cfg);
    let count = p.lipschitz_images.min(data.eval.n);
    if count == 0 {
        bail!("evaluation split is empty");
    }
    let mut means = Vec::with_capacity(count);
    for idx in 0..count {
        let img = data.eval.subset(&[idx]);
        let est = lipschitz_probe(&img, &state, p.lipschitz_alpha, delta, p.lipschitz_trials, derive_seed(cfg.eval.seed, idx as u64))?;
        means.push(est.mean);
        report.runs.push(
            RunResult::new(format!("image-{idx}"))
                .metric("lipschitz_mean", est.mean)
                .metric("lipschitz_std", est.std),
        );
    }
    report.runs.push(RunResult::new("all").metric("lipschitz_mean", means.iter().sum::<f64>() / count as f64));
    Ok(report)
}

fn write_samples(path: &Path, grids: &[rtk_core::codebook::LatentGrid], labels: &[u32]) -> Result<()> {
    let rows: Vec<_> = grids.iter().zip(labels).map(|(g, l)| serde_json::json!({ "class": l, "grid": g })).collect();
    fs::write(path, serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.common.deterministic {
        rtk_core::par::set_parallel(false);
    }
    let ctx = Ctx {
        config: load_config(&cli.common)?,
        out: cli.common.out.clone(),
    };
    let cfg = &ctx.config;
    fs::create_dir_all(&ctx.out)?;
    match cli.command {
        Command::GenData => {
            let d = generate_dataset(&cfg.dataset)?;
            save_dataset(&d, &ctx.out.join("data"))?;
            println!("{} train / {} eval images in {}", d.train.n, d.eval.n, ctx.out.join("data").display());
        }
        Command::TrainTokenizer(i) => {
            let data = ctx.dataset(&i)?;
            let outcome = train(&data.train, cfg.tokenizer, &cfg.train_config())?;
            let path = ctx.tokenizer_path(&i);
            save_tokenizer(&outcome.state, &path)?;
            fs::write(ctx.out.join("train_log.json"), serde_json::to_string_pretty(&outcome.log)?)?;
            println!("tokenizer saved to {}", path.display());
        }
        Command::EvalRfid(i) => {
            let data = ctx.dataset(&i)?;
            let state = load_tokenizer(&ctx.tokenizer_path(&i))?;
            let ext = cfg.eval.features.build()?;
            let rec = rtk_core::tokenizer::reconstruct(&data.eval, &state, None)?;
            let value = rtk_core::metrics::fid(&rec, &data.eval, &ext)?;
            let mut report = Report::new("eval-rfid", cfg);
            report.runs.push(
                RunResult::new("tokenizer")
                    .metric("rfid", value)
                    .metric("mse", rtk_core::tokenizer::mse(&rec, &data.eval)),
            );
            print_run(&report.runs[0]);
            ctx.emit(&report)?;
        }
        Command::EvalPfid(i) => {
            let data = ctx.dataset(&i)?;
            let state = load_tokenizer(&ctx.tokenizer_path(&i))?;
            let ext = cfg.eval.features.build()?;
            let p = pfid(&state, &data.eval, &cfg.eval.pfid, &ext, cfg.eval.seed)?;
            for c in &p.cells {
                println!("alpha {:.2} delta {:>4} (eff {:>3}) fid {:.6}", c.alpha, c.delta_base, c.delta_eff, c.fid);
            }
            println!("pfid {:.6}", p.pfid);
            let mut report = Report::new("eval-pfid", cfg);
            let mut run = RunResult::new("tokenizer").metric("pfid", p.pfid);
            run.pfid_cells = p.cells;
            report.runs.push(run);
            ctx.emit(&report)?;
        }
        Command::TrainGenerator(i) => {
            let data = ctx.dataset(&i)?;
            let state = load_tokenizer(&ctx.tokenizer_path(&i))?;
            let outcome = train_generator_on(&state, &data.train, cfg)?;
            let path = ctx.generator_path(&i);
            save_generator(&outcome.params, &path)?;
            println!(
                "generator saved to {} (final cross-entropy {:.4})",
                path.display(),
                outcome.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Sample { inputs, per_class } => {
            let gen = load_generator(&ctx.generator_path(&inputs))?;
            let labels: Vec<u32> = (0..gen.arch.classes as u32)
                .flat_map(|c| std::iter::repeat_n(c, per_class))
                .collect();
            let grids = sample_many(&gen, &labels, &cfg.sampler)?;
            let path = ctx.out.join("samples.json");
            write_samples(&path, &grids, &labels)?;
            println!("{} grids written to {}", grids.len(), path.display());
        }
        Command::Posttrain { inputs, sigma } => {
            let data = ctx.dataset(&inputs)?;
            let state = load_tokenizer(&ctx.tokenizer_path(&inputs))?;
            let gen = load_generator(&ctx.generator_path(&inputs))?;
            let mut pt = cfg.posttrain_config();
            if let Some(s) = sigma {
                pt.sigma = s;
            }
            let pairs = build_pairs(&data.train, &state, &gen, &pt)?;
            let (before, _) = decoder_loss(&pairs, &state)?;
            let (post, _) = posttrain_decoder(&pairs, &state, &pt, cfg.train.learning_rate)?;
            let (after, _) = decoder_loss(&pairs, &post)?;
            let path = ctx.out.join("posttrained.tok");
            save_tokenizer(&post, &path)?;
            println!("pair loss {before:.6} -> {after:.6}; post-trained tokenizer saved to {}", path.display());
        }
        Command::ProbeMmd(i) => {
            let data = ctx.dataset(&i)?;
            let state = load_tokenizer(&ctx.tokenizer_path(&i))?;
            let gen = load_generator(&ctx.generator_path(&i))?;
            let delta = effective_delta(cfg.probe.mmd_delta_base, state.arch.codebook_size, cfg.eval.pfid.k_ref);
            let table = latent_distribution_probe(&gen, &state, &data.eval, &cfg.probe.mmd_alphas, delta, &cfg.sampler)?;
            for r in &table.rows {
                println!("alpha {:.2} mmd {:.6}", r.alpha, r.mmd);
            }
            let mut report = Report::new("probe-mmd", cfg);
            let mut run = RunResult::new(format!("delta-{delta}"))
                .metric("bandwidth", table.bandwidth)
                .metric("delta", delta as f64);
            run.mmd_rows = table.rows;
            report.runs.push(run);
            ctx.emit(&report)?;
        }
        Command::ProbeLipschitz(i) => {
            let report = lipschitz_report(&ctx, &i)?;
            print_run(report.runs.last().expect("summary row"));
            ctx.emit(&report)?;
        }
        Command::Report { left, right } => {
            let l = read_report(&left)?;
            match right {
                None => {
                    println!("{} ({}), fingerprint {}", l.name, l.schema, l.fingerprint);
                    l.runs.iter().for_each(print_run);
                }
                Some(r) => {
                    let r = read_report(&r)?;
                    for d in compare_reports(&l, &r)? {
                        println!("{:<16} {:<18} {:>12.6} {:>12.6} {:>+12.6}", d.run, d.metric, d.left, d.right, d.difference());
                    }
                }
            }
        }
        Command::RunRecipe { name } => {
            let recipe = ExperimentRecipe::new(name, cfg.clone(), ctx.out.clone());
            for report in run_recipe(&recipe)? {
                report.runs.iter().for_each(print_run);
            }
            println!("outputs in {}", ctx.out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
