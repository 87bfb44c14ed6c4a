//! `dcg` command line: dataset generation, seeded experiment runs and
//! missing-rate sweeps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dcg::data::{apply_missingness, generate_synthetic, MissingnessSpec};
use dcg::experiment::{self, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "dcg", version, about = "Incomplete multi-view clustering with latent diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Output directory (overrides experiment.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed (overrides experiment.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated loss terms to switch off: diff, gcl, mi, ccl, kl.
    #[arg(long)]
    ablate: Option<String>,
    /// Continue interrupted runs from their checkpoints instead of
    /// restarting them.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate `experiment.repeats` seeded runs.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Cross product of missing rates and recovery horizons.
    Sweep {
        config: PathBuf,
        /// Missing rates, e.g. 0.1,0.3,0.5,0.7.
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        /// Reverse-sampling horizons used at inference, e.g. 50,100.
        #[arg(long = "text", alias = "t-ext", value_delimiter = ',', required = true)]
        t_exts: Vec<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write a synthetic Gaussian-cluster dataset directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_per_cluster: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_delimiter = ',', default_value = "5,5")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 6.0)]
        sep: f64,
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also delete one view from this fraction of rows.
        #[arg(long, default_value_t = 0.0)]
        missing_rate: f64,
    },
}

fn load(config: &Path, o: &Overrides) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = ExperimentConfig::from_file(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(out) = &o.out {
        cfg.experiment.out_dir = out.clone();
    }
    if let Some(seed) = o.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(list) = &o.ablate {
        cfg.ablation.disable(list)?;
    }
    Ok((cfg, RunOptions { resume: o.resume }))
}

fn progress(line: &str) {
    eprintln!("{line}");
}

fn real_main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, overrides } => {
            let (cfg, opts) = load(&config, &overrides)?;
            experiment::run(&cfg, opts, &mut progress)?;
            println!("{}", cfg.experiment.out_dir.join("results.csv").display());
        }
        Command::Sweep { config, rates, t_exts, overrides } => {
            let (cfg, opts) = load(&config, &overrides)?;
            experiment::sweep(&cfg, &rates, &t_exts, opts, &mut progress)?;
            println!("{}", cfg.experiment.out_dir.join("sweep_summary.csv").display());
        }
        Command::Generate { out, n_per_cluster, k, dims, sep, noise, seed, missing_rate } => {
            if out.exists() && out.read_dir()?.next().is_some() {
                bail!("{} exists and is not empty", out.display());
            }
            let mut ds = generate_synthetic(n_per_cluster, k, &dims, sep, noise, seed)?;
            if missing_rate > 0.0 {
                ds = apply_missingness(&ds, &MissingnessSpec { rate: missing_rate, seed })?;
            }
            ds.save(&out)?;
            println!("wrote {} samples, {} views to {}", ds.n(), ds.n_views(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
