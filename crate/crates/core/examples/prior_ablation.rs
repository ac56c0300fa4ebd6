//! The same network trained under RBF and Matern-1/2 priors: posterior samples inherit the
//! smoothness of the prior.
//!
//! `cargo run --release --example prior_ablation [config.toml] [out_dir]`

use std::path::PathBuf;

use fsp_laplace::config::ExperimentConfig;
use fsp_laplace::experiment::run_experiment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/prior_ablation.toml")));
    let (cfg, source) = ExperimentConfig::load(&path)?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| cfg.out_dir.clone());
    let dir = run_experiment(&cfg, &source, &out)?;
    print!("{}", std::fs::read_to_string(dir.join("ablation.csv"))?);
    Ok(())
}
