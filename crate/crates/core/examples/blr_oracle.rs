//! A linear model under the matching linear-kernel prior: the function-space posterior and
//! the weight-space posterior both reproduce conjugate Bayesian linear regression.
//!
//! `cargo run --release --example blr_oracle [config.toml]`

use std::path::PathBuf;

use fsp_laplace::config::ExperimentConfig;
use fsp_laplace::experiment::oracle_blr;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/oracle_blr.toml")));
    let (cfg, _) = ExperimentConfig::load(&path)?;
    let c = oracle_blr(&cfg)?;
    println!("{:>12} {:>12} {:>12} {:>12}", "blr mean", "blr var", "fsp var", "ws var");
    for i in 0..c.queries.len() {
        println!(
            "{:>12.6} {:>12.4e} {:>12.4e} {:>12.4e}",
            c.blr_mean[i], c.blr_var[i], c.fsp_var[i], c.ws_var[i]
        );
    }
    let (fm, fv) = c.fsp_rel_error();
    let (wm, wv) = c.ws_rel_error();
    println!("function space: max relative error mean {fm:.2e}, variance {fv:.2e}");
    println!("weight space:   max relative error mean {wm:.2e}, variance {wv:.2e}");
    Ok(())
}
