//! Dense check of how much posterior precision lies outside `range(U_M)`.

use nalgebra::{DMatrix, SymmetricEigen};

use super::{initial_lanczos_vector, lanczos_pinv_factor, project_jacobian, thin_svd, LanczosConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::GpPrior;
use crate::kernels::{GramOperator, DEFAULT_DENSE_GRAM_CAP};
use crate::likelihood::Likelihood;
use crate::nn::{MlpSpec, ParamVector};
use crate::points::Points;

/// Largest `P * P` the dense diagnostic will allocate.
pub const DEFAULT_DENSE_PARAM_CAP: usize = 1 << 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NullSpaceReport {
    /// `|P0 Lambda P0^T|_F / |Lambda|_F` with `P0 = I - U_M U_M^T`.
    pub ratio: f64,
    pub projected_rank: usize,
    pub num_params: usize,
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Dense generalized Gauss-Newton `sum_i J_i^T Lambda_i J_i`.
pub fn dense_ggn(spec: &MlpSpec, map: &ParamVector, data: &Dataset, likelihood: &Likelihood) -> Result<DMatrix<f64>> {
    let p = spec.num_params();
    if data.is_empty() {
        return Ok(DMatrix::zeros(p, p));
    }
    let o = spec.output_dim();
    let mut j = spec.jacobian(map, data.inputs())?.matrix;
    let f = spec.forward(map, data.inputs())?;
    for i in 0..data.len() {
        let out: Vec<f64> = f.row(i).iter().copied().collect();
        let root = sqrt_psd(&likelihood.curvature(&out));
        let block = &root * j.rows(i * o, o);
        j.rows_mut(i * o, o).copy_from(&block);
    }
    Ok(j.transpose() * j)
}

pub fn null_space_diagnostic(
    spec: &MlpSpec,
    map: &ParamVector,
    data: &Dataset,
    prior: &GpPrior,
    context: &Points,
    likelihood: &Likelihood,
    config: &LanczosConfig,
) -> Result<NullSpaceReport> {
    config.validate()?;
    let p = spec.num_params();
    if p * p > DEFAULT_DENSE_PARAM_CAP {
        return Err(Error::CapExceeded {
            what: "dense null-space diagnostic",
            requested: p * p,
            cap: DEFAULT_DENSE_PARAM_CAP,
        });
    }
    crate::train::check_model(spec, likelihood, data)?;
    let gram = GramOperator::new(prior.kernel.clone(), context.clone(), DEFAULT_DENSE_GRAM_CAP)?;
    let v0 = initial_lanczos_vector(spec, map, context, config.seed)?;
    let l = lanczos_pinv_factor(&gram, &v0, config)?.l;
    let m = project_jacobian(spec, map, context, &l)?;
    let (u, _) = thin_svd(&m, config.eps_rel)?;

    let jc = spec.jacobian(map, context)?.matrix;
    let k = prior.kernel.gram_sym(context)?;
    let prior_prec = jc.transpose() * super::dense_pinv(&k, config.eps_rel) * &jc;
    let lambda = prior_prec + dense_ggn(spec, map, data, likelihood)?;
    let total = lambda.norm();
    if total == 0.0 {
        return Ok(NullSpaceReport {
            ratio: 0.0,
            projected_rank: u.ncols(),
            num_params: p,
        });
    }
    // P0 L P0 = L - U B - (U B)^T + U (B U) U^T with B = U^T L
    let b = u.transpose() * &lambda;
    let ub = &u * &b;
    let inner = &b * &u;
    let residual = &lambda - &ub - ub.transpose() + &u * inner * u.transpose();
    Ok(NullSpaceReport {
        ratio: residual.norm() / total,
        projected_rank: u.ncols(),
        num_params: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sine;
    use crate::kernels::Kernel;
    use crate::nn::Activation;

    #[test]
    fn spanning_linear_model_has_no_null_space() {
        let spec = MlpSpec::new(vec![2, 1], Activation::Identity).unwrap();
        let w = ParamVector::from_vec(vec![0.1, 0.2, 0.3]);
        let prior = GpPrior::centered(Kernel::linear(1.0, 1.0).unwrap(), 1).unwrap();
        let ctx = Points::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let (data, _) = crate::data::gen_linear_features(10, 2, 0.1, 0).unwrap();
        let lik = Likelihood::gaussian(0.1).unwrap();
        let r = null_space_diagnostic(&spec, &w, &data, &prior, &ctx, &lik, &LanczosConfig::default()).unwrap();
        assert_eq!(r.projected_rank, 3);
        assert!(r.ratio <= 1e-10, "{}", r.ratio);
    }

    #[test]
    fn data_far_from_context_shows_up() {
        let spec = MlpSpec::tanh(1, &[6], 1).unwrap();
        let w = spec.init_params(3);
        let prior = GpPrior::centered(Kernel::rbf(1.0, 0.3).unwrap(), 1).unwrap();
        let ctx = Points::from_scalars(&[-5.0]);
        let data = gen_sine(20, 0.1, 1).unwrap();
        let lik = Likelihood::gaussian(0.1).unwrap();
        let r = null_space_diagnostic(&spec, &w, &data, &prior, &ctx, &lik, &LanczosConfig::default()).unwrap();
        assert!(r.ratio > 1e-3, "{}", r.ratio);
        assert!(r.ratio <= 1.0);
    }

    #[test]
    fn ggn_matches_explicit_sum() {
        let spec = MlpSpec::tanh(2, &[3], 2).unwrap();
        let w = spec.init_params(2);
        let data = crate::data::gen_two_moons(6, 0.1, 1).unwrap();
        let lik = Likelihood::categorical(2).unwrap();
        let got = dense_ggn(&spec, &w, &data, &lik).unwrap();
        let mut want = DMatrix::zeros(spec.num_params(), spec.num_params());
        for i in 0..data.len() {
            let x = data.inputs().row(i);
            let j = spec.jacobian(&w, &Points::new(2, x.to_vec()).unwrap()).unwrap().matrix;
            let lam = lik.curvature(&spec.forward_point(&w, x).unwrap());
            want += j.transpose() * lam * j;
        }
        assert!((got - want).amax() < 1e-12);
    }
}
