//! How much of the dense posterior precision lies outside the subspace the matrix-free
//! posterior works in, for RBF regression and Matern-1/2 classification.
//!
//! `cargo run --release --example nullspace_diagnostic`

use std::path::Path;

use fsp_laplace::config::ExperimentConfig;
use fsp_laplace::experiment::run_diagnose;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs");
    let (sine, _) = ExperimentConfig::load(&Path::new(dir).join("sine_regression.toml"))?;
    let (moons, _) = ExperimentConfig::load(&Path::new(dir).join("two_moons.toml"))?;
    let moons = moons.with_kernel("matern12(s2=9.0, l=1.0)")?;
    let out = std::env::temp_dir().join("fsp-laplace-nullspace");
    for (name, cfg) in [("RBF regression", sine), ("Matern-1/2 classification", moons)] {
        let r = run_diagnose(&cfg, &out.join(cfg.task.name()))?;
        println!(
            "{name:<27} ratio {:.3e}  (projected rank {} of {} parameters)",
            r.ratio, r.projected_rank, r.num_params
        );
    }
    Ok(())
}
