//! MAP training under a function-space prior (RKHS-norm regularizer on context points) or
//! an isotropic Gaussian weight prior.
//!
//! The minibatch objective is
//! `(N / b) sum_batch -log p(y_i | f(x_i; w)) + 1/2 (f(C) - m(C))^T K_C^{-1} (f(C) - m(C))`
//! with fresh context points `C` every step, or `... + 1/2 |w|^2 / s_p^2` for the weight prior.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::ContextSampler;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::GpPrior;
use crate::kernels::JitteredCholesky;
use crate::likelihood::{gaussian_nll_dlog_noise, Likelihood, Observation};
use crate::nn::{sum_in_order, MlpSpec, ParamVector, VJP_CHUNK};
use crate::points::Points;

/// Stream offset separating minibatch shuffles from context draws.
const SHUFFLE_STREAM: u64 = 1 << 63;

/// Counter-based random stream: the same `(seed, stream)` always yields the same draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Context points drawn per step (ignored by grid samplers).
    pub context_points: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping. `None` disables early stopping.
    pub patience: Option<usize>,
    pub seed: u64,
    /// Learn the Gaussian noise level jointly (as `log noise_std`).
    pub learn_noise: bool,
}

fn default_patience() -> Option<usize> {
    Some(50)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            context_points: 100,
            learning_rate: 1e-3,
            epochs: 1000,
            patience: default_patience(),
            seed: 0,
            learn_noise: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.patience == Some(0) {
            return Err(Error::config("patience must be positive"));
        }
        Ok(())
    }
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Prior mean and jittered Cholesky factor of the prior Gram on a fixed context set.
#[derive(Debug, Clone)]
pub struct ContextFactor {
    context: Points,
    mean: DVector<f64>,
    chol: JitteredCholesky,
}

/// `r^T K^{-1} r` together with `alpha = K^{-1} r`.
#[derive(Debug, Clone)]
pub struct RkhsEstimate {
    pub value: f64,
    pub alpha: DVector<f64>,
}

impl ContextFactor {
    pub fn new(prior: &GpPrior, context: Points) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::config("the RKHS estimator needs at least one context point"));
        }
        let gram = prior.kernel.gram_sym(&context)?;
        let chol = JitteredCholesky::new(&gram, prior.jitter)?;
        Ok(ContextFactor {
            mean: prior.mean_at(&context)?,
            context,
            chol,
        })
    }

    pub fn context(&self) -> &Points {
        &self.context
    }

    /// Absolute jitter that was added to the Gram diagonal.
    pub fn jitter(&self) -> f64 {
        self.chol.jitter
    }

    pub fn estimate(&self, spec: &MlpSpec, params: &ParamVector) -> Result<RkhsEstimate> {
        let f = spec.forward(params, &self.context)?;
        // forward returns n x O; stack (point, output) with output fastest
        let r = DVector::from_iterator(f.len(), f.transpose().iter().copied()) - &self.mean;
        let alpha = self.chol.solve(&r);
        Ok(RkhsEstimate {
            value: r.dot(&alpha),
            alpha,
        })
    }

    /// Gradient of `1/2 r^T K^{-1} r`, i.e. `J(C)^T alpha`.
    pub fn half_estimate_grad(&self, spec: &MlpSpec, params: &ParamVector, est: &RkhsEstimate) -> Result<ParamVector> {
        spec.stacked_vjp(params, &self.context, est.alpha.as_slice())
    }
}

/// Plug-in estimate `(f(C) - m(C))^T K_C^{-1} (f(C) - m(C))` of the squared RKHS norm.
pub fn rkhs_norm_estimate(spec: &MlpSpec, params: &ParamVector, prior: &GpPrior, context: &Points) -> Result<f64> {
    Ok(ContextFactor::new(prior, context.clone())?.estimate(spec, params)?.value)
}

/// Which prior regularizes training.
#[derive(Debug, Clone)]
pub enum Regularizer {
    Function { prior: GpPrior, sampler: ContextSampler },
    Isotropic { prior_std: f64 },
}

/// A regularizer resolved for one step.
#[derive(Debug, Clone, Copy)]
pub enum RegTerm<'a> {
    Function(&'a ContextFactor),
    Isotropic(f64),
}

/// Objective value split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// `(N / b) sum_batch -log p(y | f)`.
    pub nll: f64,
    /// Half the squared RKHS norm estimate, or half the scaled weight norm.
    pub reg: f64,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.nll + self.reg
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub params: ParamVector,
    /// Derivative with respect to `log noise_std` (zero for non-Gaussian likelihoods).
    pub log_noise: f64,
}

pub(crate) fn check_model(spec: &MlpSpec, likelihood: &Likelihood, data: &Dataset) -> Result<()> {
    if !data.is_empty() && data.inputs().dim() != spec.input_dim() {
        return Err(Error::shape(format!(
            "inputs have dimension {}, network expects {}",
            data.inputs().dim(),
            spec.input_dim()
        )));
    }
    if let Some(k) = likelihood.output_dim() {
        if k != spec.output_dim() {
            return Err(Error::shape(format!("{k} classes but {} network outputs", spec.output_dim())));
        }
    }
    if data.task() == crate::data::Task::Classification && !likelihood.is_classification() {
        return Err(Error::config("class labels need a categorical likelihood"));
    }
    Ok(())
}

/// `scale * sum_batch nll`, its parameter gradient and its `log noise` derivative.
fn data_term(
    spec: &MlpSpec,
    params: &ParamVector,
    likelihood: &Likelihood,
    data: &Dataset,
    batch: &[usize],
    scale: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let p = spec.num_params();
    let parts: Result<Vec<(f64, Vec<f64>, f64)>> = batch
        .par_chunks(VJP_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; p];
            let mut nll = 0.0;
            let mut dnoise = 0.0;
            for &i in chunk {
                let trace = spec.trace(params, data.inputs().row(i))?;
                let f = trace.output();
                let y = data.observation(i);
                nll += likelihood.nll(y, f)?;
                let g: Vec<f64> = likelihood.nll_grad(y, f)?.into_iter().map(|v| v * scale).collect();
                spec.vjp_traced(params, &trace, &g, &mut grad)?;
                if let (Likelihood::Gaussian { noise_std }, Observation::Real(y)) = (likelihood, y) {
                    dnoise += gaussian_nll_dlog_noise(y, f, *noise_std);
                }
            }
            Ok((nll, grad, dnoise))
        })
        .collect();
    let parts = parts?;
    let nll: f64 = parts.iter().map(|t| t.0).sum();
    let dnoise: f64 = parts.iter().map(|t| t.2).sum();
    let grad = sum_in_order(parts.into_iter().map(|t| t.1).collect(), p);
    Ok((scale * nll, grad, scale * dnoise))
}

/// Minibatch objective and its gradient. The data term is rescaled by `N / |batch|`.
pub fn objective(
    spec: &MlpSpec,
    params: &ParamVector,
    likelihood: &Likelihood,
    data: &Dataset,
    batch: &[usize],
    reg: RegTerm<'_>,
) -> Result<(Objective, ObjectiveGrad)> {
    check_model(spec, likelihood, data)?;
    let (nll, mut grad, log_noise) = if batch.is_empty() {
        (0.0, vec![0.0; spec.num_params()], 0.0)
    } else {
        data_term(spec, params, likelihood, data, batch, data.len() as f64 / batch.len() as f64)?
    };
    let reg_value = match reg {
        RegTerm::Function(factor) => {
            let est = factor.estimate(spec, params)?;
            let g = factor.half_estimate_grad(spec, params, &est)?;
            for (a, b) in grad.iter_mut().zip(g.iter()) {
                *a += b;
            }
            0.5 * est.value
        }
        RegTerm::Isotropic(prior_std) => {
            let prec = 1.0 / (prior_std * prior_std);
            for (a, w) in grad.iter_mut().zip(params.iter()) {
                *a += prec * w;
            }
            0.5 * prec * params.norm_squared()
        }
    };
    Ok((
        Objective { nll, reg: reg_value },
        ObjectiveGrad {
            params: ParamVector::from_vec(grad),
            log_noise,
        },
    ))
}

/// Mean negative log-likelihood of the network outputs.
pub fn mean_nll(spec: &MlpSpec, params: &ParamVector, likelihood: &Likelihood, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let f = spec.forward(params, data.inputs())?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let row: Vec<f64> = f.row(i).iter().copied().collect();
        total += likelihood.nll(data.observation(i), &row)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub nll_term: f64,
    pub reg_term: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,nll_term,reg_term,objective")?;
        for r in &self.rows {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e}", r.step, r.nll_term, r.reg_term, r.objective)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    /// Likelihood with the learned noise level, if it was learned.
    pub likelihood: Likelihood,
    pub log: TrainLog,
    pub steps: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn divergence_check(step: usize, obj: &Objective, grad: &ObjectiveGrad) -> Result<()> {
    if !obj.nll.is_finite() {
        return Err(Error::TrainingDiverged { step, component: "likelihood term" });
    }
    if !obj.reg.is_finite() {
        return Err(Error::TrainingDiverged { step, component: "regularizer" });
    }
    if !grad.params.is_finite() || !grad.log_noise.is_finite() {
        return Err(Error::TrainingDiverged { step, component: "gradient" });
    }
    Ok(())
}

/// Runs Adam on the regularized objective. With a validation set and a patience, training
/// stops once validation NLL has not improved for that many epochs and returns the best
/// parameters seen.
pub fn train_map(
    spec: &MlpSpec,
    init: ParamVector,
    likelihood: Likelihood,
    train: &Dataset,
    validation: Option<&Dataset>,
    regularizer: &Regularizer,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_model(spec, &likelihood, train)?;
    if init.len() != spec.num_params() {
        return Err(Error::shape("initial parameters do not match the network"));
    }
    let fixed_context = match regularizer {
        Regularizer::Function { prior, sampler } => {
            if prior.outputs() != spec.output_dim() {
                return Err(Error::shape("prior and network output counts differ"));
            }
            if sampler.dim() != spec.input_dim() {
                return Err(Error::shape("context sampler and network input dimensions differ"));
            }
            sampler.validate()?;
            if sampler.is_deterministic() {
                let ctx = sampler.sample(config.context_points, &mut stream_rng(config.seed, 0))?;
                Some(ContextFactor::new(prior, ctx)?)
            } else {
                None
            }
        }
        Regularizer::Isotropic { prior_std } => {
            if !(*prior_std > 0.0 && prior_std.is_finite()) {
                return Err(Error::InvalidHyperparameter(format!("prior std {prior_std}")));
            }
            None
        }
    };
    let learn_noise = config.learn_noise && matches!(likelihood, Likelihood::Gaussian { .. });
    let mut log_noise = match likelihood {
        Likelihood::Gaussian { noise_std } => noise_std.ln(),
        _ => 0.0,
    };
    let current_lik = |log_noise: f64| match likelihood {
        Likelihood::Gaussian { .. } => Likelihood::Gaussian { noise_std: log_noise.exp() },
        other => other,
    };

    let mut params = init;
    let p = params.len();
    let mut adam = Adam::new(p + usize::from(learn_noise), config.learning_rate);
    let mut state = vec![0.0; p + usize::from(learn_noise)];
    let mut full_grad = vec![0.0; state.len()];
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let val = validation.filter(|v| !v.is_empty());
    let mut best: Option<(f64, ParamVector, f64)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 0..config.epochs {
        order.shuffle(&mut stream_rng(config.seed, SHUFFLE_STREAM | epoch as u64));
        let batches: Vec<&[usize]> = if order.is_empty() {
            vec![&[]]
        } else {
            order.chunks(config.batch_size).collect()
        };
        for batch in batches {
            let sampled;
            let reg = match regularizer {
                Regularizer::Function { prior, sampler } => match &fixed_context {
                    Some(f) => RegTerm::Function(f),
                    None => {
                        let ctx = sampler.sample(config.context_points, &mut stream_rng(config.seed, step as u64))?;
                        sampled = ContextFactor::new(prior, ctx)?;
                        RegTerm::Function(&sampled)
                    }
                },
                Regularizer::Isotropic { prior_std } => RegTerm::Isotropic(*prior_std),
            };
            let (obj, grad) = objective(spec, &params, &current_lik(log_noise), train, batch, reg)?;
            divergence_check(step, &obj, &grad)?;
            log.rows.push(LogRow {
                step,
                nll_term: obj.nll,
                reg_term: obj.reg,
                objective: obj.total(),
            });
            state[..p].copy_from_slice(params.as_slice());
            full_grad[..p].copy_from_slice(grad.params.as_slice());
            if learn_noise {
                state[p] = log_noise;
                full_grad[p] = grad.log_noise;
            }
            adam.step(&mut state, &full_grad);
            params.as_mut_slice().copy_from_slice(&state[..p]);
            if learn_noise {
                log_noise = state[p];
            }
            if !params.is_finite() || !log_noise.is_finite() {
                return Err(Error::TrainingDiverged { step, component: "parameters" });
            }
            step += 1;
        }
        epochs_run = epoch + 1;

        if let (Some(v), Some(patience)) = (val, config.patience) {
            let score = mean_nll(spec, &params, &current_lik(log_noise), v)?;
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, params.clone(), log_noise));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, best_params, best_noise)) = best {
        params = best_params;
        log_noise = best_noise;
    }
    log::info!("trained {step} steps over {epochs_run} epochs");
    Ok(TrainOutcome {
        params,
        likelihood: current_lik(log_noise),
        log,
        steps: step,
        epochs_run,
        stopped_early,
    })
}
