//! Two-moons classification with an RBF function-space prior: accuracy, calibration and
//! the posterior standard deviation of the class probability away from the data.
//!
//! `cargo run --release --example two_moons [config.toml] [out_dir]`

use std::path::PathBuf;

use fsp_laplace::config::ExperimentConfig;
use fsp_laplace::experiment::run_predictive;
use fsp_laplace::points::Points;
use fsp_laplace::predict::{lin_predict, sample_posterior};
use fsp_laplace::likelihood::softmax;

fn probability_std(samples: &[nalgebra::DMatrix<f64>], i: usize) -> f64 {
    let p: Vec<f64> = samples
        .iter()
        .map(|s| softmax(&[s[(i, 0)], s[(i, 1)]])[1])
        .collect();
    let m = p.iter().sum::<f64>() / p.len() as f64;
    (p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / p.len() as f64).sqrt()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/two_moons.toml")));
    let (cfg, _) = ExperimentConfig::load(&path)?;
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| cfg.out_dir.clone());
    let run = run_predictive(&cfg, &out)?;
    for m in &run.methods {
        println!("{:<11} {:?}", m.name, m.metrics.scalars());
    }

    // a far point at radius 4 and a point between the moons
    let probes = Points::from_rows(&[vec![4.0 / 2f64.sqrt(), 4.0 / 2f64.sqrt()], vec![0.5, 0.25]])?;
    let post = &run.fit.posterior;
    let lin = lin_predict(post, &probes)?;
    let samples = sample_posterior(post, &probes, 2000, 1)?.values;
    for (i, name) in ["far (r = 4)", "boundary"].iter().enumerate() {
        println!(
            "{name:<12} latent std {:.4}, probability std {:.4}",
            lin.std(i, 1),
            probability_std(&samples, i)
        );
    }
    println!(
        "posterior rank {}, truncated {}, context variance excess {:.3e}",
        post.rank(),
        post.truncation,
        run.context_excess
    );
    Ok(())
}
