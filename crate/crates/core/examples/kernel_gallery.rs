//! Prior draws from kernel expressions, written as one SVG panel per kernel.
//!
//! `cargo run --release --example kernel_gallery [out.svg]`

use fsp_laplace::context::linspace;
use fsp_laplace::gp::GpPrior;
use fsp_laplace::kernels::parse_kernel;
use fsp_laplace::plot::{render, BandPanel, Panel};
use fsp_laplace::points::Points;

const KERNELS: [&str; 6] = [
    "rbf(l=0.5)",
    "matern12(l=0.5)",
    "matern52(l=0.5)",
    "periodic(l=0.8, T=1.0)",
    "scaled(0.5, product(rbf(l=2.0), periodic(l=0.5, T=1.0)))",
    "sum(linear(w=0.3, b=0.1), rbf(s2=0.2, l=0.2))",
];

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "kernel_gallery.svg".into());
    let xs = linspace(-3.0, 3.0, 200);
    let points = Points::from_scalars(&xs);
    let mut panels = Vec::new();
    for expr in KERNELS {
        let prior = GpPrior::centered(parse_kernel(expr)?, 1)?;
        let draws = prior.sample(&points, 3, 7)?;
        let std: Vec<f64> = prior.std_at(&points).iter().copied().collect();
        println!("{expr:<58} prior std at 0: {:.3}", std[100]);
        panels.push(Panel::Band(BandPanel {
            title: expr.to_string(),
            xs: xs.clone(),
            mean: vec![0.0; xs.len()],
            std,
            samples: (0..draws.ncols()).map(|j| draws.column(j).iter().copied().collect()).collect(),
            data: Vec::new(),
        }));
    }
    std::fs::write(&out, render(&panels))?;
    println!("wrote {out}");
    Ok(())
}
