//! `cps`: generate data, train a denoiser, sample with constraints, evaluate,
//! and check the error bound numerically.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use cps_core::CpsError;

use crate::config::{Method, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cps", version, about = "Constrained posterior sampling for time series", after_long_help = config::CONFIG_KEYS)]
struct Cli {
    /// TOML run configuration. Flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Global seed, copied into every section.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test waveform CSVs.
    GenData(GenDataArgs),
    /// Train the learned denoiser and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Draw samples and write them with a violation report.
    Sample(SampleArgs),
    /// Score generated samples against their references.
    Eval(EvalArgs),
    /// Run the error-bound sweep and the step-matrix norm checks.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Total samples, split 80/10/10 (default: 13320/1665/1665).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from the checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Reference CSV the features are extracted from.
    #[arg(long)]
    references: Option<PathBuf>,
    /// Comma-separated features, e.g. mean,value@1,value@last.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    #[arg(long)]
    guidance_weight: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Write per-step diagnostics under traces/.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    generated: Option<PathBuf>,
    #[arg(long)]
    references: Option<PathBuf>,
    /// Comma-separated features to re-extract from each reference.
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Bound constants; repeat or comma-separate.
    #[arg(long = "k", value_delimiter = ',')]
    ks: Option<Vec<f64>>,
    #[arg(long)]
    no_norm_checks: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    set(&mut cfg.output_dir, cli.output_dir.clone());
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::GenData(a) => {
            if a.count.is_some() {
                cfg.data.count = a.count;
            }
            set(&mut cfg.data.horizon, a.horizon);
        }
        Command::Train(a) => {
            if a.data.is_some() {
                cfg.denoiser.data = a.data.clone();
            }
            if a.checkpoint.is_some() {
                cfg.denoiser.checkpoint = a.checkpoint.clone();
            }
            cfg.denoiser.resume |= a.resume;
            let t = &mut cfg.denoiser.training;
            set(&mut t.iterations, a.iterations);
            set(&mut t.learning_rate, a.learning_rate);
            set(&mut t.batch_size, a.batch_size);
        }
        Command::Sample(a) => {
            set(&mut cfg.sampler.method, a.method);
            set(&mut cfg.sampler.count, a.count);
            if a.checkpoint.is_some() {
                cfg.denoiser.checkpoint = a.checkpoint.clone();
            }
            if a.references.is_some() {
                cfg.constraints.references = a.references.clone();
            }
            set(&mut cfg.constraints.features, a.features.clone());
            set(&mut cfg.sampler.guidance_weight, a.guidance_weight);
            set(&mut cfg.sampler.eta, a.eta);
            cfg.sampler.trace |= a.trace;
        }
        Command::Eval(a) => {
            if a.generated.is_some() {
                cfg.metrics.generated = a.generated.clone();
            }
            if a.references.is_some() {
                cfg.metrics.references = a.references.clone();
            }
            set(&mut cfg.constraints.features, a.features.clone());
        }
        Command::Verify(a) => {
            set(&mut cfg.analysis.instances, a.instances);
            set(&mut cfg.analysis.steps, a.steps);
            set(&mut cfg.analysis.ks, a.ks.clone());
            if a.no_norm_checks {
                cfg.analysis.norm_checks = false;
            }
        }
    }
    cfg.constraints.features.retain(|f| !f.trim().is_empty());
    cfg.apply_global_seed();
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let resolved = cfg.write_resolved()?;
    log::debug!("resolved config written to {}", resolved.display());
    match &cli.command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::Sample(_) => commands::sample_cmd(&cfg),
        Command::Eval(_) => commands::eval_cmd(&cfg),
        Command::Verify(_) => commands::verify_cmd(&cfg),
    }
}

/// 1 for usage and configuration problems, 2 for numerical failures, 3 for
/// failed verification.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::VerifyFailed>().is_some() {
        return 3;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CpsError>() {
            return match e {
                CpsError::Numerical { .. } | CpsError::Diverged { .. } | CpsError::TerminalNoise { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // clap reserves 2 for usage errors; here 2 means a numerical failure
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
