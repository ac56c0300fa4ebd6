//! Observation models: negative log-likelihoods, their gradients in function space, and
//! the PSD output-space curvature used by the Gauss-Newton approximation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Likelihood {
    /// Homoskedastic Gaussian noise with standard deviation `noise_std`.
    Gaussian { noise_std: f64 },
    /// Softmax over `num_classes` logits.
    Categorical { num_classes: usize },
}

/// A single target: a real vector for regression, a class index for classification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation<'a> {
    Real(&'a [f64]),
    Class(usize),
}

/// `-d^2/df^2 log p(y | f)`, an `O x O` PSD matrix.
pub type CurvatureBlock = DMatrix<f64>;

impl Likelihood {
    pub fn gaussian(noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0 && noise_std.is_finite()) {
            return Err(Error::InvalidHyperparameter(format!("noise std must be positive, got {noise_std}")));
        }
        Ok(Likelihood::Gaussian { noise_std })
    }

    pub fn categorical(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidHyperparameter("categorical likelihood needs at least 2 classes".into()));
        }
        Ok(Likelihood::Categorical { num_classes })
    }

    fn check(&self, y: Observation<'_>, f: &[f64]) -> Result<()> {
        match (self, y) {
            (Likelihood::Gaussian { .. }, Observation::Real(y)) if y.len() == f.len() => Ok(()),
            (Likelihood::Gaussian { .. }, Observation::Real(_)) => {
                Err(Error::shape("target and output dimensions differ"))
            }
            (Likelihood::Categorical { num_classes }, Observation::Class(c)) => {
                if f.len() != *num_classes {
                    Err(Error::shape(format!("{} logits for {num_classes} classes", f.len())))
                } else if c >= *num_classes {
                    Err(Error::Domain(format!("class label {c} outside 0..{num_classes}")))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::Domain("observation kind does not match the likelihood".into())),
        }
    }

    /// `-log p(y | f)`.
    pub fn nll(&self, y: Observation<'_>, f: &[f64]) -> Result<f64> {
        self.check(y, f)?;
        Ok(match (self, y) {
            (Likelihood::Gaussian { noise_std }, Observation::Real(y)) => gaussian_nll(y, f, *noise_std),
            (Likelihood::Categorical { .. }, Observation::Class(c)) => log_sum_exp(f) - f[c],
            _ => unreachable!(),
        })
    }

    /// `d/df -log p(y | f)`.
    pub fn nll_grad(&self, y: Observation<'_>, f: &[f64]) -> Result<Vec<f64>> {
        self.check(y, f)?;
        Ok(match (self, y) {
            (Likelihood::Gaussian { noise_std }, Observation::Real(y)) => {
                let prec = 1.0 / (noise_std * noise_std);
                f.iter().zip(y).map(|(fi, yi)| (fi - yi) * prec).collect()
            }
            (Likelihood::Categorical { .. }, Observation::Class(c)) => {
                let mut p = softmax(f);
                p[c] -= 1.0;
                p
            }
            _ => unreachable!(),
        })
    }

    /// Gauss-Newton curvature block; independent of the target for both models.
    pub fn curvature(&self, f: &[f64]) -> CurvatureBlock {
        match self {
            Likelihood::Gaussian { noise_std } => {
                DMatrix::identity(f.len(), f.len()) / (noise_std * noise_std)
            }
            Likelihood::Categorical { .. } => {
                let p = softmax(f);
                let n = p.len();
                DMatrix::from_fn(n, n, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
            }
        }
    }

    pub fn output_dim(&self) -> Option<usize> {
        match self {
            Likelihood::Gaussian { .. } => None,
            Likelihood::Categorical { num_classes } => Some(*num_classes),
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Likelihood::Categorical { .. })
    }
}

pub(crate) fn gaussian_nll(y: &[f64], f: &[f64], noise_std: f64) -> f64 {
    let var = noise_std * noise_std;
    let sq: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    0.5 * sq / var + 0.5 * f.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

/// Derivative of the Gaussian NLL with respect to `log noise_std`.
pub(crate) fn gaussian_nll_dlog_noise(y: &[f64], f: &[f64], noise_std: f64) -> f64 {
    let sq: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
    -sq / (noise_std * noise_std) + f.len() as f64
}

pub fn log_sum_exp(f: &[f64]) -> f64 {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(f);
    f.iter().map(|v| (v - lse).exp()).collect()
}
