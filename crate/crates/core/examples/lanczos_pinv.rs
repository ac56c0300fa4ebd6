//! Low-rank pseudo-inverse square roots of kernel Gram matrices from Lanczos, checked
//! against a dense eigendecomposition.
//!
//! `cargo run --release --example lanczos_pinv`

use fsp_laplace::context::linspace;
use fsp_laplace::kernels::{GramOperator, Kernel, MultiOutputKernel, DEFAULT_DENSE_GRAM_CAP};
use fsp_laplace::laplace::{dense_pinv, lanczos_pinv_factor, LanczosConfig};
use fsp_laplace::points::Points;
use nalgebra::DVector;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let xs = Points::from_scalars(&linspace(-2.0, 2.0, 60));
    let config = LanczosConfig::default();
    for kernel in [Kernel::rbf(1.0, 0.5)?, Kernel::matern12(1.0, 0.5)?, Kernel::linear(1.0, 1.0)?] {
        let name = kernel.to_string();
        let op = GramOperator::new(MultiOutputKernel::replicated(kernel, 1)?, xs.clone(), DEFAULT_DENSE_GRAM_CAP)?;
        let k = op.kernel().gram_sym(&xs)?;
        let start = DVector::from_element(xs.len(), 1.0);
        let f = lanczos_pinv_factor(&op, &start, &config)?;
        let approx = &f.l * f.l.transpose();
        let reproduce = (&k * &approx * &k - &k).norm() / k.norm();
        let dense = dense_pinv(&k, config.eps_rel);
        println!(
            "{name:<40} rank {:>2} after {:>2} iterations, |K L L^T K - K| / |K| = {reproduce:.2e}, \
             |L L^T - K^+| / |K^+| = {:.2e}",
            f.rank(),
            f.iterations,
            (&approx - &dense).norm() / dense.norm()
        );
    }
    Ok(())
}
