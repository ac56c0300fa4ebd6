//! Sine regression under an RBF function-space prior, compared with the weight-space
//! Laplace baseline and exact GP regression.
//!
//! `cargo run --release --example sine_regression [config.toml] [out_dir]`

use std::path::PathBuf;

use fsp_laplace::config::ExperimentConfig;
use fsp_laplace::experiment::run_predictive;
use fsp_laplace::points::Points;
use fsp_laplace::predict::lin_predict;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/sine_regression.toml")));
    let (cfg, _) = ExperimentConfig::load(&path)?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| cfg.out_dir.clone());
    let run = run_predictive(&cfg, &out)?;

    for m in &run.methods {
        println!("{:<11} {:?}", m.name, m.metrics.scalars());
    }
    let post = &run.fit.posterior;
    let probe = Points::from_scalars(&[3.0, run.data.train.inputs().row(0)[0]]);
    let pred = lin_predict(post, &probe)?;
    let prior_std = run.prior.std_at(&probe);
    for i in 0..2 {
        println!(
            "x = {:+.3}: mean {:+.4}, std {:.4}, prior std {:.4}",
            probe.row(i)[0],
            pred.means[(i, 0)],
            pred.std(i, 0),
            prior_std[i]
        );
    }
    println!(
        "posterior rank {}, truncated {}, context variance excess {:.3e}",
        post.rank(),
        post.truncation,
        run.context_excess
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
