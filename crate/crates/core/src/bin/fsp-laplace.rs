use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsp_laplace::config::ExperimentConfig;
use fsp_laplace::experiment::{self, with_threads};
use fsp_laplace::Error;

#[derive(Parser)]
#[command(name = "fsp-laplace", version, about = "Function-space prior training and Laplace posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the MAP network under the function-space prior.
    Train(Common),
    /// Fit the Laplace posterior around a trained checkpoint.
    Laplace(Common),
    /// Predict and evaluate with a fitted posterior.
    Predict(Common),
    /// Run a full experiment and write every artifact.
    Experiment(Common),
    /// Measure posterior precision outside the projected subspace.
    DiagnoseNullspace(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; the configured `out_dir` by default.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 runs single-threaded.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

fn run(cli: Cli) -> Result<(), Error> {
    let (Command::Train(c) | Command::Laplace(c) | Command::Predict(c) | Command::Experiment(c) | Command::DiagnoseNullspace(c)) =
        &cli.command;
    let (mut cfg, source) = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    with_threads(c.threads, || -> Result<(), Error> {
        match &cli.command {
            Command::Train(_) => {
                let t = experiment::run_train(&cfg, &source, &out)?;
                println!("trained {} steps over {} epochs", t.steps, t.epochs_run);
            }
            Command::Laplace(_) => {
                let fit = experiment::run_laplace(&cfg, &out)?;
                println!(
                    "posterior rank {} (lanczos rank {}, truncated {})",
                    fit.posterior.rank(),
                    fit.lanczos_rank,
                    fit.posterior.truncation
                );
            }
            Command::Predict(_) => {
                let m = experiment::run_predict(&cfg, &out)?;
                for (k, v) in m.scalars() {
                    println!("{k} = {v}");
                }
            }
            Command::Experiment(_) => {
                let dir = experiment::run_experiment(&cfg, &source, &out)?;
                println!("artifacts written to {}", dir.display());
            }
            Command::DiagnoseNullspace(_) => {
                let r = experiment::run_diagnose(&cfg, &out)?;
                println!("null-space ratio {:e} (projected rank {} of {} parameters)", r.ratio, r.projected_rank, r.num_params);
            }
        }
        Ok(())
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
