//! Weight-space baseline: MAP under an isotropic Gaussian weight prior and the full-GGN
//! linearized Laplace posterior `I / s_p^2 + sum_i J_i^T Lambda_i J_i`.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::laplace::DEFAULT_DENSE_PARAM_CAP;
use crate::likelihood::Likelihood;
use crate::nn::{MlpSpec, ParamVector};
use crate::train::{self, RegTerm, Regularizer, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotropicPrior {
    pub prior_std: f64,
}

impl Default for IsotropicPrior {
    fn default() -> Self {
        IsotropicPrior { prior_std: 1.0 }
    }
}

impl IsotropicPrior {
    pub fn new(prior_std: f64) -> Result<Self> {
        if !(prior_std > 0.0 && prior_std.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("weight prior std {prior_std}")));
        }
        Ok(IsotropicPrior { prior_std })
    }

    pub fn precision(&self) -> f64 {
        1.0 / (self.prior_std * self.prior_std)
    }
}

/// `sum_i -log p(y_i | f(x_i)) + 1/2 |w|^2 / s_p^2` over the whole dataset, with gradient.
pub fn map_objective_ws(
    spec: &MlpSpec,
    params: &ParamVector,
    prior: &IsotropicPrior,
    likelihood: &Likelihood,
    data: &Dataset,
) -> Result<(f64, ParamVector)> {
    let all: Vec<usize> = (0..data.len()).collect();
    let (obj, grad) = train::objective(spec, params, likelihood, data, &all, RegTerm::Isotropic(prior.prior_std))?;
    Ok((obj.total(), grad.params))
}

/// Adam MAP training under the weight prior.
pub fn train_map_ws(
    spec: &MlpSpec,
    init: ParamVector,
    prior: &IsotropicPrior,
    likelihood: Likelihood,
    train_set: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train::train_map(
        spec,
        init,
        likelihood,
        train_set,
        validation,
        &Regularizer::Isotropic {
            prior_std: prior.prior_std,
        },
        config,
    )
}

/// Dense Laplace posterior with its Cholesky factor `Lambda = L L^T`.
#[derive(Debug, Clone)]
pub struct DensePosterior {
    pub spec: MlpSpec,
    pub map: ParamVector,
    pub precision: DMatrix<f64>,
    pub cholesky: Cholesky<f64, Dyn>,
}

impl DensePosterior {
    /// Dense weight-space covariance `Lambda^{-1}`.
    pub fn covariance(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }
}

pub fn laplace_ws(
    spec: &MlpSpec,
    map: &ParamVector,
    prior: &IsotropicPrior,
    data: &Dataset,
    likelihood: &Likelihood,
) -> Result<DensePosterior> {
    let p = spec.num_params();
    if p * p > DEFAULT_DENSE_PARAM_CAP {
        return Err(Error::CapExceeded {
            what: "dense weight-space precision",
            requested: p * p,
            cap: DEFAULT_DENSE_PARAM_CAP,
        });
    }
    if map.len() != p {
        return Err(Error::shape("MAP parameters do not match the network"));
    }
    train::check_model(spec, likelihood, data)?;
    let mut precision = crate::laplace::dense_ggn(spec, map, data, likelihood)?;
    precision = (&precision + precision.transpose()) * 0.5;
    for i in 0..p {
        precision[(i, i)] += prior.precision();
    }
    let cholesky = Cholesky::new(precision.clone())
        .ok_or_else(|| Error::numerical("weight-space precision is not positive definite"))?;
    Ok(DensePosterior {
        spec: spec.clone(),
        map: map.clone(),
        precision,
        cholesky,
    })
}
