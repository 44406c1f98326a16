//! `tmud`: runs the harness stages from files to files.
//!
//! Configuration comes from an optional JSON file, then the `TMUD_SEED`
//! and `TMUD_THREADS` environment variables, then command-line flags.
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use log::info;
use tmud_core::pipeline::{self, Paths, RunConfig, Stage, StageManifest};
use tmud_core::{Result, TmudError};

#[derive(Parser, Debug)]
#[command(name = "tmud", version, about = "Ex-ante filtration and ex-post experimentation for image classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; absent fields take their defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed (overrides TMUD_SEED and the config file)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides TMUD_THREADS)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Place data, models and reports under this directory
    #[arg(long, global = true, value_name = "DIR")]
    root: Option<PathBuf>,
    /// Print the effective configuration and exit
    #[arg(long, global = true)]
    print_config: bool,
    /// Log stage progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic face corpus: images, masks, latents, manifest
    Synth(SynthArgs),
    /// Ingest or simulate ratings; filter unreliable evaluators; binarize
    Ratings,
    /// Train one classifier per rated label
    Train,
    /// Component decomposition and disjunctive-rule detection
    Filtrate,
    /// Encode faces and fit the gender direction in latent space
    Direction,
    /// Generate, retain and balance edited faces
    Edit,
    /// Difference samples and aggregate, per-evaluator and per-face fits
    Experiment,
    /// Render the Markdown and JSON report tables
    Report,
    /// Run every stage in order
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of faces
    #[arg(long)]
    n: Option<usize>,
    /// Image side length in pixels
    #[arg(long)]
    size: Option<usize>,
    /// JSON array of label rules
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
    /// Data directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Reuse validated outputs of every stage before this one
    #[arg(long, value_name = "STAGE", value_parser = parse_stage)]
    resume_from: Option<Stage>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse().map_err(|e: TmudError| e.to_string())
}

fn env_override<T: std::str::FromStr>(name: &str) -> Result<Option<T>> {
    match std::env::var(name) {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| TmudError::Config(format!("{name}={v:?} is not a non-negative integer"))),
        _ => Ok(None),
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(path) if !path.exists() => {
            return Err(TmudError::Config(format!("config file {} does not exist", path.display())));
        }
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = env_override("TMUD_SEED")? {
        cfg.seed = seed;
    }
    if let Some(threads) = env_override("TMUD_THREADS")? {
        cfg.threads = threads;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = c.threads {
        cfg.threads = threads;
    }
    if let Some(root) = &c.root {
        cfg.paths = Paths::under(root);
    }
    if let Command::Synth(a) = &cli.command {
        if let Some(n) = a.n {
            cfg.synth.n = n;
        }
        if let Some(size) = a.size {
            cfg.size = size;
        }
        if let Some(labels) = &a.labels {
            cfg.synth.rules_file = Some(labels.clone());
        }
        if let Some(out) = &a.out {
            cfg.paths.data_root = out.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &RunConfig) -> Result<Vec<StageManifest>> {
    let single = |stage| pipeline::run_stage(cfg, stage).map(|m| vec![m]);
    match &cli.command {
        Command::Synth(_) => single(Stage::Synth),
        Command::Ratings => single(Stage::Ratings),
        Command::Train => single(Stage::Train),
        Command::Filtrate => single(Stage::Filtrate),
        Command::Direction => single(Stage::Direction),
        Command::Edit => single(Stage::Edit),
        Command::Experiment => single(Stage::Experiment),
        Command::Report => single(Stage::Report),
        Command::Pipeline(a) => pipeline::run_pipeline(cfg, a.resume_from),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = resolve(&cli).and_then(|cfg| {
        if cli.common.print_config {
            println!("{}", cfg.to_json());
            return Ok(());
        }
        info!("config hash {}", cfg.config_hash());
        let manifests = pipeline::with_threads(cfg.effective_threads(), || run(&cli, &cfg))??;
        for m in manifests {
            println!("{}: {}", m.stage, m.summary);
        }
        Ok(())
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
