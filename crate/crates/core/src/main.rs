use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hoi_groups::cli::{self, Ablation, RunConfig};
use hoi_groups::{Error, Result};

/// Synthetic human-object interaction detection with geometric and semantic
/// grouping: data generation, training, evaluation and diagnostics.
#[derive(Parser)]
#[command(name = "hoi-groups", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `out_dir` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val scene files and per-class counts.
    GenData(Common),
    /// Train from scratch, logging every step and evaluating each epoch.
    Train(Common),
    /// Score a checkpoint and write the report and prediction dump.
    Eval {
        #[command(flatten)]
        common: Common,
        /// none, no-geo or no-sem.
        #[arg(long, default_value = "none")]
        ablate: String,
        /// Defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file; defaults to the val split of the data dir.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides the `top_k` key.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Finite-difference check of every differentiable op and module.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Overrides the `gradcheck_tol` key; `inf` always passes.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Train and evaluate once per value of one setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Kg, Ks, Lg, Ls or group_mode.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Parameter count, FLOP estimate and forward throughput.
    Bench(Common),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => cli::gen_data(&resolve(&c)?).map(drop),
        Command::Train(c) => cli::train(&resolve(&c)?).map(drop),
        Command::Eval {
            common,
            ablate,
            checkpoint,
            data,
            top_k,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(k) = top_k {
                cfg.eval.top_k = k;
            }
            let ablation = Ablation::parse(&ablate)?;
            cli::eval(&cfg, checkpoint.as_deref(), data.as_deref(), ablation).map(drop)
        }
        Command::Gradcheck { common, tol } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = tol {
                if t.is_nan() || t < 0.0 {
                    return Err(Error::Config("tolerance must be non-negative".into()));
                }
                cfg.gradcheck_tol = t;
            }
            cli::gradcheck(&cfg).map(drop)
        }
        Command::Sweep { common, axis, values } => cli::sweep(&resolve(&common)?, &axis, &values).map(drop),
        Command::Bench(c) => cli::bench(&resolve(&c)?).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
