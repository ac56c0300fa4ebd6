//! Covariance functions, Gram matrices and jittered Cholesky solves.
//!
//! Multi-output Grams are indexed `(point, output)` with the output index running fastest,
//! matching the row order of [`crate::nn::JacobianBlock`]. Outputs are independent, so
//! entries coupling different outputs are zero.

mod expr;

pub use expr::{parse_kernel, KernelParseError};

use std::fmt;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::Points;

/// Gram matrices up to this many entries are cached densely by [`GramOperator`].
pub const DEFAULT_DENSE_GRAM_CAP: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Lengthscale {
    Scalar(f64),
    PerDim(Vec<f64>),
}

impl Lengthscale {
    fn values(&self) -> &[f64] {
        match self {
            Lengthscale::Scalar(l) => std::slice::from_ref(l),
            Lengthscale::PerDim(v) => v,
        }
    }

    /// Squared distance `sum ((x - y) / l)^2`.
    #[inline]
    fn scaled_sq_dist(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Lengthscale::Scalar(l) => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (l * l),
            Lengthscale::PerDim(ls) => x
                .iter()
                .zip(y)
                .zip(ls)
                .map(|((a, b), l)| {
                    let d = (a - b) / l;
                    d * d
                })
                .sum(),
        }
    }

    #[inline]
    fn get(&self, d: usize) -> f64 {
        match self {
            Lengthscale::Scalar(l) => *l,
            Lengthscale::PerDim(ls) => ls[d],
        }
    }
}

/// A scalar covariance function.
///
/// Base kernels carry a signal variance (`variance`, the `sigma^2` multiplier) and a
/// lengthscale. `Scaled(c, k)` is the amplitude-scaled kernel `c^2 k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    Rbf {
        variance: f64,
        lengthscale: Lengthscale,
    },
    Matern12 {
        variance: f64,
        lengthscale: Lengthscale,
    },
    Matern32 {
        variance: f64,
        lengthscale: Lengthscale,
    },
    Matern52 {
        variance: f64,
        lengthscale: Lengthscale,
    },
    RationalQuadratic {
        variance: f64,
        lengthscale: Lengthscale,
        alpha: f64,
    },
    Periodic {
        variance: f64,
        lengthscale: Lengthscale,
        period: f64,
    },
    /// Dot-product kernel `w x.x' + b`: the function-space image of a Gaussian prior on
    /// the weights and bias of an affine model.
    Linear {
        weight_variance: f64,
        bias_variance: f64,
    },
    Sum(Box<Kernel>, Box<Kernel>),
    Product(Box<Kernel>, Box<Kernel>),
    Scaled(f64, Box<Kernel>),
}

fn positive(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidHyperparameter(format!("{name} must be positive and finite, got {value}")))
    }
}

fn positive_lengthscale(ls: &Lengthscale) -> Result<()> {
    if ls.values().is_empty() {
        return Err(Error::InvalidHyperparameter("empty lengthscale list".into()));
    }
    ls.values().iter().try_for_each(|&l| positive("lengthscale", l))
}

impl Kernel {
    pub fn rbf(variance: f64, lengthscale: f64) -> Result<Kernel> {
        Kernel::Rbf {
            variance,
            lengthscale: Lengthscale::Scalar(lengthscale),
        }
        .validated()
    }

    pub fn matern12(variance: f64, lengthscale: f64) -> Result<Kernel> {
        Kernel::Matern12 {
            variance,
            lengthscale: Lengthscale::Scalar(lengthscale),
        }
        .validated()
    }

    pub fn matern32(variance: f64, lengthscale: f64) -> Result<Kernel> {
        Kernel::Matern32 {
            variance,
            lengthscale: Lengthscale::Scalar(lengthscale),
        }
        .validated()
    }

    pub fn matern52(variance: f64, lengthscale: f64) -> Result<Kernel> {
        Kernel::Matern52 {
            variance,
            lengthscale: Lengthscale::Scalar(lengthscale),
        }
        .validated()
    }

    pub fn rational_quadratic(variance: f64, lengthscale: f64, alpha: f64) -> Result<Kernel> {
        Kernel::RationalQuadratic {
            variance,
            lengthscale: Lengthscale::Scalar(lengthscale),
            alpha,
        }
        .validated()
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Result<Kernel> {
        Kernel::Periodic {
            variance,
            lengthscale: Lengthscale::Scalar(lengthscale),
            period,
        }
        .validated()
    }

    pub fn linear(weight_variance: f64, bias_variance: f64) -> Result<Kernel> {
        Kernel::Linear {
            weight_variance,
            bias_variance,
        }
        .validated()
    }

    pub fn sum(a: Kernel, b: Kernel) -> Kernel {
        Kernel::Sum(Box::new(a), Box::new(b))
    }

    pub fn product(a: Kernel, b: Kernel) -> Kernel {
        Kernel::Product(Box::new(a), Box::new(b))
    }

    pub fn scaled(c: f64, k: Kernel) -> Result<Kernel> {
        Kernel::Scaled(c, Box::new(k)).validated()
    }

    fn validated(self) -> Result<Kernel> {
        self.validate()?;
        Ok(self)
    }

    /// Checks that every hyperparameter is strictly positive.
    pub fn validate(&self) -> Result<()> {
        match self {
            Kernel::Rbf { variance, lengthscale }
            | Kernel::Matern12 { variance, lengthscale }
            | Kernel::Matern32 { variance, lengthscale }
            | Kernel::Matern52 { variance, lengthscale } => {
                positive("variance", *variance)?;
                positive_lengthscale(lengthscale)
            }
            Kernel::RationalQuadratic {
                variance,
                lengthscale,
                alpha,
            } => {
                positive("variance", *variance)?;
                positive_lengthscale(lengthscale)?;
                positive("alpha", *alpha)
            }
            Kernel::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                positive("variance", *variance)?;
                positive_lengthscale(lengthscale)?;
                positive("period", *period)
            }
            Kernel::Linear {
                weight_variance,
                bias_variance,
            } => {
                positive("weight variance", *weight_variance)?;
                positive("bias variance", *bias_variance)
            }
            Kernel::Sum(a, b) | Kernel::Product(a, b) => {
                a.validate()?;
                b.validate()
            }
            Kernel::Scaled(c, k) => {
                positive("scale", *c)?;
                k.validate()
            }
        }
    }

    /// Checks that per-dimension lengthscales agree with the input dimension.
    pub fn check_input_dim(&self, dim: usize) -> Result<()> {
        match self {
            Kernel::Rbf { lengthscale, .. }
            | Kernel::Matern12 { lengthscale, .. }
            | Kernel::Matern32 { lengthscale, .. }
            | Kernel::Matern52 { lengthscale, .. }
            | Kernel::RationalQuadratic { lengthscale, .. }
            | Kernel::Periodic { lengthscale, .. } => match lengthscale {
                Lengthscale::PerDim(ls) if ls.len() != dim => Err(Error::shape(format!(
                    "kernel has {} lengthscales for {dim}-dimensional inputs",
                    ls.len()
                ))),
                _ => Ok(()),
            },
            Kernel::Linear { .. } => Ok(()),
            Kernel::Sum(a, b) | Kernel::Product(a, b) => {
                a.check_input_dim(dim)?;
                b.check_input_dim(dim)
            }
            Kernel::Scaled(_, k) => k.check_input_dim(dim),
        }
    }

    /// `k(x, x')`. Both points must have the same dimension.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), y.len());
        match self {
            Kernel::Rbf { variance, lengthscale } => variance * (-0.5 * lengthscale.scaled_sq_dist(x, y)).exp(),
            Kernel::Matern12 { variance, lengthscale } => {
                let r = lengthscale.scaled_sq_dist(x, y).sqrt();
                variance * (-r).exp()
            }
            Kernel::Matern32 { variance, lengthscale } => {
                let s = 3f64.sqrt() * lengthscale.scaled_sq_dist(x, y).sqrt();
                variance * (1.0 + s) * (-s).exp()
            }
            Kernel::Matern52 { variance, lengthscale } => {
                let r2 = lengthscale.scaled_sq_dist(x, y);
                let s = 5f64.sqrt() * r2.sqrt();
                variance * (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
            }
            Kernel::RationalQuadratic {
                variance,
                lengthscale,
                alpha,
            } => {
                let r2 = lengthscale.scaled_sq_dist(x, y);
                variance * (1.0 + r2 / (2.0 * alpha)).powf(-alpha)
            }
            Kernel::Periodic {
                variance,
                lengthscale,
                period,
            } => {
                let s: f64 = x
                    .iter()
                    .zip(y)
                    .enumerate()
                    .map(|(d, (a, b))| {
                        let v = (std::f64::consts::PI * (a - b) / period).sin() / lengthscale.get(d);
                        v * v
                    })
                    .sum();
                variance * (-2.0 * s).exp()
            }
            Kernel::Linear {
                weight_variance,
                bias_variance,
            } => weight_variance * crate::nn::dot(x, y) + bias_variance,
            Kernel::Sum(a, b) => a.eval(x, y) + b.eval(x, y),
            Kernel::Product(a, b) => a.eval(x, y) * b.eval(x, y),
            Kernel::Scaled(c, k) => c * c * k.eval(x, y),
        }
    }

    /// True when `k(x, x')` depends on `x - x'` only.
    pub fn is_stationary(&self) -> bool {
        match self {
            Kernel::Linear { .. } => false,
            Kernel::Sum(a, b) | Kernel::Product(a, b) => a.is_stationary() && b.is_stationary(),
            Kernel::Scaled(_, k) => k.is_stationary(),
            _ => true,
        }
    }

    /// Same kernel family with a new signal variance and scalar lengthscale. Only defined
    /// for base kernels with a lengthscale.
    pub fn with_variance_lengthscale(&self, variance: f64, lengthscale: f64) -> Result<Kernel> {
        let ls = Lengthscale::Scalar(lengthscale);
        let k = match self {
            Kernel::Rbf { .. } => Kernel::Rbf { variance, lengthscale: ls },
            Kernel::Matern12 { .. } => Kernel::Matern12 { variance, lengthscale: ls },
            Kernel::Matern32 { .. } => Kernel::Matern32 { variance, lengthscale: ls },
            Kernel::Matern52 { .. } => Kernel::Matern52 { variance, lengthscale: ls },
            Kernel::RationalQuadratic { alpha, .. } => Kernel::RationalQuadratic {
                variance,
                lengthscale: ls,
                alpha: *alpha,
            },
            Kernel::Periodic { period, .. } => Kernel::Periodic {
                variance,
                lengthscale: ls,
                period: *period,
            },
            _ => {
                return Err(Error::config(
                    "hyperparameter selection needs a base kernel with a lengthscale",
                ))
            }
        };
        k.validated()
    }
}

impl fmt::Display for Lengthscale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lengthscale::Scalar(l) => write!(f, "{l}"),
            Lengthscale::PerDim(ls) => {
                let parts: Vec<String> = ls.iter().map(|l| l.to_string()).collect();
                write!(f, "[{}]", parts.join(", "))
            }
        }
    }
}

/// Renders the kernel in the expression language accepted by [`parse_kernel`].
impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Rbf { variance, lengthscale } => write!(f, "rbf(s2={variance}, l={lengthscale})"),
            Kernel::Matern12 { variance, lengthscale } => write!(f, "matern12(s2={variance}, l={lengthscale})"),
            Kernel::Matern32 { variance, lengthscale } => write!(f, "matern32(s2={variance}, l={lengthscale})"),
            Kernel::Matern52 { variance, lengthscale } => write!(f, "matern52(s2={variance}, l={lengthscale})"),
            Kernel::RationalQuadratic {
                variance,
                lengthscale,
                alpha,
            } => write!(f, "rq(s2={variance}, l={lengthscale}, alpha={alpha})"),
            Kernel::Periodic {
                variance,
                lengthscale,
                period,
            } => write!(f, "periodic(s2={variance}, l={lengthscale}, T={period})"),
            Kernel::Linear {
                weight_variance,
                bias_variance,
            } => write!(f, "linear(w={weight_variance}, b={bias_variance})"),
            Kernel::Sum(a, b) => write!(f, "sum({a}, {b})"),
            Kernel::Product(a, b) => write!(f, "product({a}, {b})"),
            Kernel::Scaled(c, k) => write!(f, "scaled({c}, {k})"),
        }
    }
}

/// One independent scalar kernel per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiOutputKernel {
    kernels: Vec<Kernel>,
}

impl MultiOutputKernel {
    pub fn new(kernels: Vec<Kernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::shape("a multi-output kernel needs at least one output"));
        }
        kernels.iter().try_for_each(Kernel::validate)?;
        Ok(MultiOutputKernel { kernels })
    }

    /// The same scalar kernel on every output.
    pub fn replicated(kernel: Kernel, outputs: usize) -> Result<Self> {
        MultiOutputKernel::new(vec![kernel; outputs.max(1)])
    }

    pub fn outputs(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel(&self, output: usize) -> &Kernel {
        &self.kernels[output]
    }

    pub fn check_input_dim(&self, dim: usize) -> Result<()> {
        self.kernels.iter().try_for_each(|k| k.check_input_dim(dim))
    }

    /// Prior marginal variances `k_o(x, x)` for all points, stacked `(point, output)`.
    pub fn diag(&self, points: &Points) -> DVector<f64> {
        let o = self.outputs();
        DVector::from_fn(points.len() * o, |r, _| {
            let x = points.row(r / o);
            self.kernels[r % o].eval(x, x)
        })
    }

    /// Dense cross-covariance `k(X, X')`, `(n O) x (n' O)`.
    pub fn gram(&self, xs: &Points, ys: &Points) -> Result<DMatrix<f64>> {
        if !xs.is_empty() && !ys.is_empty() && xs.dim() != ys.dim() {
            return Err(Error::shape("gram over point sets of different dimension"));
        }
        if !xs.is_empty() {
            self.check_input_dim(xs.dim())?;
        }
        let o = self.outputs();
        let (n, m) = (xs.len(), ys.len());
        let mut out = DMatrix::zeros(n * o, m * o);
        let columns: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|j| {
                let y = ys.row(j);
                let mut col = vec![0.0; n * o];
                for i in 0..n {
                    let x = xs.row(i);
                    for (k, kern) in self.kernels.iter().enumerate() {
                        col[i * o + k] = kern.eval(x, y);
                    }
                }
                col
            })
            .collect();
        for (j, col) in columns.into_iter().enumerate() {
            for k in 0..o {
                for i in 0..n {
                    out[(i * o + k, j * o + k)] = col[i * o + k];
                }
            }
        }
        Ok(out)
    }

    /// Dense symmetric Gram `k(X, X)`.
    pub fn gram_sym(&self, xs: &Points) -> Result<DMatrix<f64>> {
        let mut g = self.gram(xs, xs)?;
        // exact symmetry regardless of evaluation order
        let n = g.nrows();
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (g[(i, j)] + g[(j, i)]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        Ok(g)
    }

    /// `k(X, X) v` without forming the Gram matrix.
    pub fn gram_matvec(&self, xs: &Points, v: &DVector<f64>) -> Result<DVector<f64>> {
        GramOperator::matrix_free(self.clone(), xs.clone())?.matvec(v)
    }
}

/// Symmetric Gram matrix exposed through matrix-vector products.
///
/// Small Grams are cached densely; above the cap every product re-evaluates the kernel.
#[derive(Debug, Clone)]
pub struct GramOperator {
    kernel: MultiOutputKernel,
    points: Points,
    dense: Option<DMatrix<f64>>,
}

impl GramOperator {
    pub fn new(kernel: MultiOutputKernel, points: Points, dense_cap: usize) -> Result<Self> {
        if !points.is_empty() {
            kernel.check_input_dim(points.dim())?;
        }
        let size = points.len() * kernel.outputs();
        let dense = if size * size <= dense_cap {
            Some(kernel.gram_sym(&points)?)
        } else {
            None
        };
        Ok(GramOperator { kernel, points, dense })
    }

    pub fn matrix_free(kernel: MultiOutputKernel, points: Points) -> Result<Self> {
        GramOperator::new(kernel, points, 0)
    }

    pub fn dim(&self) -> usize {
        self.points.len() * self.kernel.outputs()
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn points(&self) -> &Points {
        &self.points
    }

    pub fn kernel(&self) -> &MultiOutputKernel {
        &self.kernel
    }

    pub fn diag(&self) -> DVector<f64> {
        self.kernel.diag(&self.points)
    }

    pub fn matvec(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.dim() {
            return Err(Error::shape(format!(
                "vector of length {} against a Gram of size {}",
                v.len(),
                self.dim()
            )));
        }
        if let Some(dense) = &self.dense {
            return Ok(dense * v);
        }
        let o = self.kernel.outputs();
        let n = self.points.len();
        let rows: Vec<f64> = (0..n * o)
            .into_par_iter()
            .map(|r| {
                let (i, k) = (r / o, r % o);
                let x = self.points.row(i);
                let kern = self.kernel.kernel(k);
                (0..n).map(|j| kern.eval(x, self.points.row(j)) * v[j * o + k]).sum()
            })
            .collect();
        Ok(DVector::from_vec(rows))
    }
}

/// Diagonal jitter `tau * mean(diag)` added before Cholesky, escalated tenfold on failure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial: f64,
    pub max: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial: 1e-8,
            max: 1e-4,
        }
    }
}

impl JitterPolicy {
    /// Plain Cholesky without any jitter.
    pub fn none() -> Self {
        JitterPolicy { initial: 0.0, max: 0.0 }
    }

    pub fn with_initial(initial: f64) -> Self {
        JitterPolicy {
            initial,
            max: initial.max(1e-4),
        }
    }
}

/// Cholesky factor of `K + jitter I`, recording the jitter that was needed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn new(matrix: &DMatrix<f64>, policy: JitterPolicy) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(Error::shape("Cholesky of a non-square matrix"));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite entries in matrix to factorize"));
        }
        let scale = if n == 0 { 1.0 } else { matrix.diagonal().mean().abs().max(f64::MIN_POSITIVE) };
        let mut tau = policy.initial;
        loop {
            let jitter = tau * scale;
            let mut shifted = matrix.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(factor) = Cholesky::new(shifted) {
                return Ok(JitteredCholesky { factor, jitter });
            }
            if tau >= policy.max || policy.max == 0.0 {
                return Err(Error::numerical(format!(
                    "Cholesky failed with relative jitter up to {:e}",
                    policy.max
                )));
            }
            tau = if tau == 0.0 { 1e-10 } else { (tau * 10.0).min(policy.max) };
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    /// `log det(K + jitter I)`.
    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_kernels() -> Vec<Kernel> {
        vec![
            Kernel::rbf(1.3, 0.7).unwrap(),
            Kernel::matern12(0.8, 0.5).unwrap(),
            Kernel::matern32(1.0, 1.1).unwrap(),
            Kernel::matern52(2.0, 0.4).unwrap(),
            Kernel::rational_quadratic(1.0, 0.6, 1.5).unwrap(),
            Kernel::periodic(1.0, 0.9, 1.3).unwrap(),
            Kernel::sum(Kernel::rbf(1.0, 0.3).unwrap(), Kernel::matern32(0.5, 2.0).unwrap()),
            Kernel::product(Kernel::rbf(1.0, 2.0).unwrap(), Kernel::periodic(1.0, 0.5, 1.0).unwrap()),
            Kernel::scaled(0.5, Kernel::matern52(1.0, 1.0).unwrap()).unwrap(),
        ]
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Points {
        Points::new(dim, (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let rbf = Kernel::rbf(1.0, 0.5).unwrap();
        assert_eq!(rbf.eval(&[0.3], &[0.3]), 1.0);
        let m12 = Kernel::matern12(1.0, 1.0).unwrap();
        assert!((m12.eval(&[0.0], &[1.0]) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((m12.eval(&[0.0], &[1.0]) - 0.367879).abs() < 1e-6);
        let per = Kernel::periodic(1.7, 0.4, 2.5).unwrap();
        for x in [-3.0, 0.0, 0.7, 11.2] {
            assert!((per.eval(&[x], &[x + 2.5]) - per.eval(&[x], &[x])).abs() < 1e-12);
        }
        let m32 = Kernel::matern32(1.0, 1.0).unwrap();
        let s = 3f64.sqrt();
        assert!((m32.eval(&[0.0], &[1.0]) - (1.0 + s) * (-s).exp()).abs() < 1e-15);
    }

    #[test]
    fn invalid_hyperparameters_rejected_at_construction() {
        assert!(Kernel::rbf(0.0, 1.0).is_err());
        assert!(Kernel::matern32(1.0, -1.0).is_err());
        assert!(Kernel::periodic(1.0, 1.0, 0.0).is_err());
        assert!(Kernel::rational_quadratic(1.0, 1.0, f64::NAN).is_err());
        assert!(Kernel::scaled(0.0, Kernel::rbf(1.0, 1.0).unwrap()).is_err());
        let bad = Kernel::Sum(
            Box::new(Kernel::rbf(1.0, 1.0).unwrap()),
            Box::new(Kernel::Rbf {
                variance: -1.0,
                lengthscale: Lengthscale::Scalar(1.0),
            }),
        );
        assert!(MultiOutputKernel::new(vec![bad]).is_err());
    }

    #[test]
    fn symmetry_positive_diagonal_and_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in test_kernels() {
            for _ in 0..20 {
                let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let shift: Vec<f64> = (0..2).map(|_| rng.random_range(-5.0..5.0)).collect();
                assert_eq!(k.eval(&x, &y), k.eval(&y, &x));
                assert!(k.eval(&x, &x) > 0.0);
                let xs: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a + b).collect();
                let ys: Vec<f64> = y.iter().zip(&shift).map(|(a, b)| a + b).collect();
                assert!(k.is_stationary());
                assert!((k.eval(&x, &y) - k.eval(&xs, &ys)).abs() < 1e-12, "{k}");
            }
        }
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for k in test_kernels() {
            for n in [1, 5, 17, 32] {
                let pts = random_points(&mut rng, n, 2);
                let g = MultiOutputKernel::replicated(k.clone(), 1).unwrap().gram_sym(&pts).unwrap();
                let eig = SymmetricEigen::new(g.clone()).eigenvalues;
                let floor = -1e-8 * g.trace() / n as f64;
                assert!(eig.min() >= floor, "{k}: {}", eig.min());
            }
        }
    }

    #[test]
    fn kernel_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 12, 1);
        let a = Kernel::rbf(1.0, 0.4).unwrap();
        let b = Kernel::matern12(0.7, 1.2).unwrap();
        let g = |k: Kernel| MultiOutputKernel::replicated(k, 1).unwrap().gram_sym(&pts).unwrap();
        let sum = g(Kernel::sum(a.clone(), b.clone()));
        assert!((sum - g(a.clone()) - g(b.clone())).amax() < 1e-12);
        let scaled = g(Kernel::scaled(1.7, a.clone()).unwrap());
        assert!((scaled - g(a.clone()) * (1.7 * 1.7)).amax() < 1e-12);
        let prod = g(Kernel::product(a.clone(), b.clone()));
        assert!((prod - g(a).component_mul(&g(b))).amax() < 1e-12);
    }

    #[test]
    fn gram_matches_elementwise_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = random_points(&mut rng, 3, 1);
        let k = Kernel::rbf(1.0, 0.8).unwrap();
        let g = MultiOutputKernel::replicated(k.clone(), 1).unwrap().gram(&pts, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let d = pts.row(i)[0] - pts.row(j)[0];
                assert!((g[(i, j)] - (-0.5 * d * d / 0.64).exp()).abs() < 1e-15);
            }
        }
        let one = MultiOutputKernel::replicated(k.clone(), 1)
            .unwrap()
            .gram(&Points::from_scalars(&[0.2]), &Points::from_scalars(&[0.2]))
            .unwrap();
        assert_eq!(one.shape(), (1, 1));
        assert_eq!(one[(0, 0)], 1.0);
    }

    #[test]
    fn multi_output_block_structure() {
        let pts = Points::from_scalars(&[0.0, 0.5, 1.5]);
        let mk = MultiOutputKernel::new(vec![Kernel::rbf(1.0, 1.0).unwrap(), Kernel::matern12(2.0, 0.5).unwrap()])
            .unwrap();
        let g = mk.gram(&pts, &pts).unwrap();
        assert_eq!(g.shape(), (6, 6));
        for r in 0..6 {
            for c in 0..6 {
                let (i, o) = (r / 2, r % 2);
                let (j, o2) = (c / 2, c % 2);
                let want = if o == o2 {
                    mk.kernel(o).eval(pts.row(i), pts.row(j))
                } else {
                    0.0
                };
                assert_eq!(g[(r, c)], want);
            }
        }
    }

    #[test]
    fn matvec_agrees_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 9, 2);
        let mk = MultiOutputKernel::new(vec![Kernel::rbf(1.0, 1.0).unwrap(), Kernel::matern32(0.5, 0.7).unwrap()])
            .unwrap();
        let dense = mk.gram_sym(&pts).unwrap();
        let op = GramOperator::matrix_free(mk.clone(), pts.clone()).unwrap();
        assert!(!op.is_dense());
        assert_eq!(op.matvec(&DVector::zeros(18)).unwrap(), DVector::zeros(18));
        for j in 0..18 {
            let mut e = DVector::zeros(18);
            e[j] = 1.0;
            let col = op.matvec(&e).unwrap();
            assert!((col - dense.column(j)).amax() < 1e-10);
        }
        let v = DVector::from_fn(18, |i, _| (i as f64).sin());
        assert!((mk.gram_matvec(&pts, &v).unwrap() - &dense * &v).amax() < 1e-10);
        let single = Points::from_scalars(&[0.4]);
        let k = MultiOutputKernel::replicated(Kernel::rbf(2.5, 1.0).unwrap(), 1).unwrap();
        let out = k.gram_matvec(&single, &DVector::from_vec(vec![3.0])).unwrap();
        assert_eq!(out[0], 7.5);
        assert!(op.matvec(&DVector::zeros(3)).is_err());
    }

    #[test]
    fn duplicated_points_need_jitter() {
        let pts = Points::from_scalars(&[0.1, 0.1, 0.7]);
        let g = MultiOutputKernel::replicated(Kernel::rbf(1.0, 1.0).unwrap(), 1)
            .unwrap()
            .gram_sym(&pts)
            .unwrap();
        assert!(JitteredCholesky::new(&g, JitterPolicy::none()).is_err());
        let chol = JitteredCholesky::new(&g, JitterPolicy::default()).unwrap();
        assert!(chol.jitter > 0.0 && chol.jitter <= 1e-4);
    }
}
