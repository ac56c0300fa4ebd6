//! Linearized Laplace posterior under a GP function-space prior, built matrix-free.
//!
//! The posterior precision `J(C)^T K_C^+ J(C) + sum_i J_i^T Lambda_i J_i` is only ever
//! touched through Jacobian-vector products. A Lanczos factor `L L^T ~ K_C^+` gives the
//! projected prior precision `M M^T` with `M = J(C)^T L`, the curvature is assembled inside
//! `range(M)`, and the resulting square root `S` is truncated so that the predicted
//! variance at each context point never exceeds the prior variance there.

mod curvature;
mod diagnostic;
mod io;
mod lanczos;

pub use curvature::{
    assemble_projected_curvature, initial_lanczos_vector, jacobian_times, project_jacobian, thin_svd,
    truncate_and_factor, ProjectedCurvature,
};
pub use diagnostic::{dense_ggn, null_space_diagnostic, NullSpaceReport, DEFAULT_DENSE_PARAM_CAP};
pub use io::{read_posterior, write_posterior};
pub use lanczos::{dense_pinv, lanczos_pinv_factor, LanczosConfig, PinvFactor, Reorthogonalization, SymmetricOperator};

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::GpPrior;
use crate::kernels::{GramOperator, DEFAULT_DENSE_GRAM_CAP};
use crate::likelihood::Likelihood;
use crate::nn::{MlpSpec, ParamVector};
use crate::points::Points;

/// MAP weights and a low-rank square root `S` of the posterior covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFactors {
    pub spec: MlpSpec,
    pub map: ParamVector,
    /// `P x rank`; the weight-space covariance is `S S^T`.
    pub s: DMatrix<f64>,
    /// Retained eigenvalues of the projected curvature, ascending.
    pub eigenvalues: Vec<f64>,
    /// Number of smallest-eigenvalue directions that were dropped.
    pub truncation: usize,
    /// Rank of the projected curvature before truncation.
    pub projected_rank: usize,
    pub context: Points,
}

impl PosteriorFactors {
    pub fn rank(&self) -> usize {
        self.s.ncols()
    }

    /// `J(X) S`, stacked `(point, output)`.
    pub fn function_factor(&self, xs: &Points) -> Result<DMatrix<f64>> {
        jacobian_times(&self.spec, &self.map, xs, &self.s)
    }

    /// Predicted marginal variances `diag(J(X) S S^T J(X)^T)`.
    pub fn marginal_variances(&self, xs: &Points) -> Result<DVector<f64>> {
        let g = self.function_factor(xs)?;
        Ok(DVector::from_fn(g.nrows(), |i, _| g.row(i).norm_squared()))
    }
}

/// Intermediate objects of a fit, kept for diagnostics.
#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub posterior: PosteriorFactors,
    pub lanczos_rank: usize,
    pub lanczos_iterations: usize,
}

/// Runs the full pipeline: Lanczos factor of the context Gram, projection, curvature
/// assembly and truncation.
pub fn fit_laplace(
    spec: &MlpSpec,
    map: &ParamVector,
    prior: &GpPrior,
    data: &Dataset,
    likelihood: &Likelihood,
    context: &Points,
    config: &LanczosConfig,
) -> Result<LaplaceFit> {
    config.validate()?;
    if map.len() != spec.num_params() {
        return Err(Error::shape("MAP parameters do not match the network"));
    }
    if prior.outputs() != spec.output_dim() {
        return Err(Error::shape("prior and network output counts differ"));
    }
    if context.is_empty() {
        return Err(Error::config("the Laplace posterior needs at least one context point"));
    }
    if context.dim() != spec.input_dim() {
        return Err(Error::shape("context and network input dimensions differ"));
    }
    let gram = GramOperator::new(prior.kernel.clone(), context.clone(), DEFAULT_DENSE_GRAM_CAP)?;
    let v0 = initial_lanczos_vector(spec, map, context, config.seed)?;
    let pinv = lanczos_pinv_factor(&gram, &v0, config)?;
    let m = project_jacobian(spec, map, context, &pinv.l)?;
    let pc = assemble_projected_curvature(&m, spec, map, data, likelihood, config.eps_rel)?;
    let posterior = truncate_and_factor(&pc, prior, spec, map, context, config.eps_rel)?;
    Ok(LaplaceFit {
        posterior,
        lanczos_rank: pinv.rank(),
        lanczos_iterations: pinv.iterations,
    })
}
