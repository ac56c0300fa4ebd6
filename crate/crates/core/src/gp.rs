//! Gaussian-process priors over network outputs and the exact GP-regression baseline.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::kernels::{JitterPolicy, JitteredCholesky, Kernel, MultiOutputKernel};
use crate::points::Points;

/// Prior mean function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorMean {
    /// One constant per output.
    Constant(Vec<f64>),
    /// Piecewise-linear interpolation of tabulated values over a 1-D input, held
    /// constant outside the table. The same function is used for every output.
    Tabulated { knots: Vec<f64>, values: Vec<f64> },
}

impl PriorMean {
    pub fn zero(outputs: usize) -> Self {
        PriorMean::Constant(vec![0.0; outputs])
    }

    pub fn constant(value: f64, outputs: usize) -> Self {
        PriorMean::Constant(vec![value; outputs])
    }

    pub fn tabulated(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.is_empty() || knots.len() != values.len() {
            return Err(Error::config("tabulated mean needs equally many knots and values"));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("tabulated mean knots must be strictly increasing"));
        }
        if knots.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::config("tabulated mean must be finite"));
        }
        Ok(PriorMean::Tabulated { knots, values })
    }

    fn value(&self, x: &[f64], output: usize) -> f64 {
        match self {
            PriorMean::Constant(c) => c[output],
            PriorMean::Tabulated { knots, values } => {
                let t = x[0];
                if t <= knots[0] {
                    return values[0];
                }
                if t >= *knots.last().unwrap() {
                    return *values.last().unwrap();
                }
                let j = knots.partition_point(|&k| k <= t);
                let (x0, x1) = (knots[j - 1], knots[j]);
                let w = (t - x0) / (x1 - x0);
                values[j - 1] * (1.0 - w) + values[j] * w
            }
        }
    }
}

/// GP prior `u ~ GP(m, k)` over `O` independent output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpPrior {
    pub mean: PriorMean,
    pub kernel: MultiOutputKernel,
    pub jitter: JitterPolicy,
}

impl GpPrior {
    pub fn new(mean: PriorMean, kernel: MultiOutputKernel, jitter: JitterPolicy) -> Result<Self> {
        if let PriorMean::Constant(c) = &mean {
            if c.len() != kernel.outputs() {
                return Err(Error::shape(format!(
                    "mean has {} outputs, kernel has {}",
                    c.len(),
                    kernel.outputs()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("prior mean must be finite"));
            }
        }
        Ok(GpPrior { mean, kernel, jitter })
    }

    /// Zero-mean prior with one shared kernel replicated over `outputs` channels.
    pub fn centered(kernel: Kernel, outputs: usize) -> Result<Self> {
        GpPrior::new(
            PriorMean::zero(outputs),
            MultiOutputKernel::replicated(kernel, outputs)?,
            JitterPolicy::default(),
        )
    }

    pub fn outputs(&self) -> usize {
        self.kernel.outputs()
    }

    /// `m(X)` stacked `(point, output)`.
    pub fn mean_at(&self, xs: &Points) -> Result<DVector<f64>> {
        if matches!(self.mean, PriorMean::Tabulated { .. }) && !xs.is_empty() && xs.dim() != 1 {
            return Err(Error::shape("tabulated prior means need 1-D inputs"));
        }
        let o = self.outputs();
        Ok(DVector::from_fn(xs.len() * o, |r, _| self.mean.value(xs.row(r / o), r % o)))
    }

    /// Prior marginal standard deviations at `xs`, stacked `(point, output)`.
    pub fn std_at(&self, xs: &Points) -> DVector<f64> {
        self.kernel.diag(xs).map(f64::sqrt)
    }

    /// Draws `m(X) + chol(K + jitter) eps`, one sample per row.
    pub fn sample(&self, xs: &Points, n_samples: usize, seed: u64) -> Result<DMatrix<f64>> {
        let gram = self.kernel.gram_sym(xs)?;
        let chol = JitteredCholesky::new(&gram, self.jitter)?;
        let l = chol.l();
        let mean = self.mean_at(xs)?;
        let dim = gram.nrows();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = DMatrix::zeros(n_samples, dim);
        for s in 0..n_samples {
            let eps = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let draw = &mean + &l * eps;
            out.row_mut(s).copy_from(&draw.transpose());
        }
        Ok(out)
    }
}

/// Conjugate GP-regression posterior under homoskedastic Gaussian noise.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    prior: GpPrior,
    inputs: Points,
    chol: Option<JitteredCholesky>,
    alpha: DVector<f64>,
}

fn regression_targets(dataset: &Dataset, outputs: usize) -> Result<DVector<f64>> {
    match dataset.targets() {
        Targets::Real(y) => {
            if !y.is_empty() && y.dim() != outputs {
                return Err(Error::shape("target dimension differs from the prior's output count"));
            }
            Ok(DVector::from_column_slice(y.as_slice()))
        }
        Targets::Class { .. } => Err(Error::config("GP regression needs real-valued targets")),
    }
}

fn noisy_gram(prior: &GpPrior, xs: &Points, noise_std: f64) -> Result<DMatrix<f64>> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidHyperparameter(format!("noise std {noise_std}")));
    }
    let mut k = prior.kernel.gram_sym(xs)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_std * noise_std;
    }
    Ok(k)
}

impl GpPosterior {
    pub fn fit(prior: &GpPrior, dataset: &Dataset, noise_std: f64) -> Result<Self> {
        let y = regression_targets(dataset, prior.outputs())?;
        let xs = dataset.inputs().clone();
        if xs.is_empty() {
            return Ok(GpPosterior {
                prior: prior.clone(),
                inputs: xs,
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let k = noisy_gram(prior, &xs, noise_std)?;
        let chol = JitteredCholesky::new(&k, prior.jitter)?;
        let resid = y - prior.mean_at(&xs)?;
        let alpha = chol.solve(&resid);
        Ok(GpPosterior {
            prior: prior.clone(),
            inputs: xs,
            chol: Some(chol),
            alpha,
        })
    }

    /// Posterior mean and marginal variance (of the latent function) at `queries`,
    /// stacked `(point, output)`.
    pub fn predict(&self, queries: &Points) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut mean = self.prior.mean_at(queries)?;
        let mut var = self.prior.kernel.diag(queries);
        if let Some(chol) = &self.chol {
            let cross = self.prior.kernel.gram(&self.inputs, queries)?;
            mean += cross.transpose() * &self.alpha;
            let v = chol
                .factor
                .l_dirty()
                .solve_lower_triangular(&cross)
                .ok_or_else(|| Error::numerical("triangular solve failed"))?;
            for j in 0..var.len() {
                var[j] = (var[j] - v.column(j).norm_squared()).max(0.0);
            }
        }
        Ok((mean, var))
    }
}

pub fn gp_regress(prior: &GpPrior, dataset: &Dataset, noise_std: f64) -> Result<GpPosterior> {
    GpPosterior::fit(prior, dataset, noise_std)
}

/// The three terms of the log marginal likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMarginal {
    /// `-1/2 r^T (K + s^2 I)^{-1} r`
    pub fit: f64,
    /// `-1/2 log det(K + s^2 I)`
    pub complexity: f64,
    /// `-n/2 log 2 pi`
    pub constant: f64,
}

impl LogMarginal {
    pub fn total(&self) -> f64 {
        self.fit + self.complexity + self.constant
    }
}

pub fn log_marginal_terms(prior: &GpPrior, dataset: &Dataset, noise_std: f64) -> Result<LogMarginal> {
    let y = regression_targets(dataset, prior.outputs())?;
    let xs = dataset.inputs();
    if xs.is_empty() {
        return Ok(LogMarginal {
            fit: 0.0,
            complexity: 0.0,
            constant: 0.0,
        });
    }
    let k = noisy_gram(prior, xs, noise_std)?;
    let chol = JitteredCholesky::new(&k, prior.jitter)?;
    let resid = y - prior.mean_at(xs)?;
    let alpha = chol.solve(&resid);
    Ok(LogMarginal {
        fit: -0.5 * resid.dot(&alpha),
        complexity: -0.5 * chol.log_det(),
        constant: -0.5 * resid.len() as f64 * (2.0 * std::f64::consts::PI).ln(),
    })
}

pub fn log_marginal_likelihood(prior: &GpPrior, dataset: &Dataset, noise_std: f64) -> Result<f64> {
    Ok(log_marginal_terms(prior, dataset, noise_std)?.total())
}

/// Candidate signal variances and lengthscales for grid-search selection.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGrid {
    pub variances: Vec<f64>,
    pub lengthscales: Vec<f64>,
}

pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

impl Default for HyperGrid {
    fn default() -> Self {
        HyperGrid {
            variances: log_spaced(0.05, 5.0, 11),
            lengthscales: log_spaced(0.02, 5.0, 25),
        }
    }
}

/// Result of a grid search over kernel hyperparameters.
#[derive(Debug, Clone)]
pub struct Selection {
    pub kernel: Kernel,
    pub log_marginal: f64,
}

/// Replaces the base kernel's `(variance, lengthscale)` by the grid point with the
/// highest log marginal likelihood. Ties keep the first candidate in grid order.
pub fn select_hyperparameters(
    base: &Kernel,
    mean: &PriorMean,
    dataset: &Dataset,
    noise_std: f64,
    grid: &HyperGrid,
) -> Result<Selection> {
    let outputs = match dataset.targets() {
        Targets::Real(y) if !y.is_empty() => y.dim(),
        _ => return Err(Error::config("hyperparameter selection needs regression data")),
    };
    let mut best: Option<Selection> = None;
    for &variance in &grid.variances {
        for &lengthscale in &grid.lengthscales {
            let kernel = base.with_variance_lengthscale(variance, lengthscale)?;
            let prior = GpPrior::new(
                mean.clone(),
                MultiOutputKernel::replicated(kernel.clone(), outputs)?,
                JitterPolicy::default(),
            )?;
            let lml = match log_marginal_likelihood(&prior, dataset, noise_std) {
                Ok(v) => v,
                Err(Error::Numerical(_)) => continue,
                Err(e) => return Err(e),
            };
            if best.as_ref().is_none_or(|b| lml > b.log_marginal) {
                best = Some(Selection {
                    kernel,
                    log_marginal: lml,
                });
            }
        }
    }
    best.ok_or_else(|| Error::numerical("no grid point produced a finite marginal likelihood"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sine;

    fn rbf_prior(variance: f64, lengthscale: f64) -> GpPrior {
        GpPrior::centered(Kernel::rbf(variance, lengthscale).unwrap(), 1).unwrap()
    }

    /// Textbook GP regression written directly from the normal equations.
    fn dense_gp(xs: &[f64], ys: &[f64], q: &[f64], s2: f64, l: f64, noise: f64) -> (Vec<f64>, Vec<f64>) {
        let k = |a: f64, b: f64| s2 * (-(a - b) * (a - b) / (2.0 * l * l)).exp();
        let n = xs.len();
        let kxx = DMatrix::from_fn(n, n, |i, j| k(xs[i], xs[j]) + if i == j { noise * noise } else { 0.0 });
        let inv = kxx.try_inverse().unwrap();
        let y = DVector::from_column_slice(ys);
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for &t in q {
            let ks = DVector::from_fn(n, |i, _| k(xs[i], t));
            means.push((ks.transpose() * &inv * &y)[0]);
            vars.push(k(t, t) - (ks.transpose() * &inv * &ks)[0]);
        }
        (means, vars)
    }

    #[test]
    fn degenerate_prior_samples_equal_mean() {
        let prior = GpPrior::new(
            PriorMean::constant(0.7, 1),
            MultiOutputKernel::replicated(Kernel::rbf(1e-12, 1.0).unwrap(), 1).unwrap(),
            JitterPolicy::default(),
        )
        .unwrap();
        let s = prior.sample(&Points::from_scalars(&[0.0, 0.5, 1.0]), 20, 1).unwrap();
        assert!(s.iter().all(|v| (v - 0.7).abs() < 1e-5));
    }

    #[test]
    fn prior_samples_are_seeded() {
        let prior = rbf_prior(1.0, 0.5);
        let x = Points::from_scalars(&[0.0, 0.3]);
        assert_eq!(prior.sample(&x, 4, 7).unwrap(), prior.sample(&x, 4, 7).unwrap());
        assert_ne!(prior.sample(&x, 4, 7).unwrap(), prior.sample(&x, 4, 8).unwrap());
    }

    #[test]
    fn prior_sample_covariance_matches_gram() {
        let prior = rbf_prior(1.5, 0.6);
        let x = Points::from_scalars(&[-0.4, 0.1, 0.9]);
        let n = 100_000;
        let s = prior.sample(&x, n, 3).unwrap();
        let k = prior.kernel.gram_sym(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let emp = s.column(i).dot(&s.column(j)) / n as f64;
                let se = ((k[(i, i)] * k[(j, j)] + k[(i, j)] * k[(i, j)]) / n as f64).sqrt();
                assert!((emp - k[(i, j)]).abs() <= 3.0 * se, "({i},{j}) {emp} vs {}", k[(i, j)]);
            }
        }
    }

    #[test]
    fn interpolates_single_observation() {
        let prior = rbf_prior(1.0, 0.5);
        let ds = Dataset::regression(Points::from_scalars(&[0.3]), Points::from_scalars(&[1.7])).unwrap();
        let post = gp_regress(&prior, &ds, 1e-6).unwrap();
        let (m, v) = post.predict(&Points::from_scalars(&[0.3])).unwrap();
        assert!((m[0] - 1.7).abs() < 1e-6);
        assert!(v[0] < 1e-6);
    }

    #[test]
    fn no_data_posterior_is_prior() {
        let prior = GpPrior::new(
            PriorMean::constant(0.25, 1),
            MultiOutputKernel::replicated(Kernel::matern32(2.0, 0.5).unwrap(), 1).unwrap(),
            JitterPolicy::default(),
        )
        .unwrap();
        let post = gp_regress(&prior, &Dataset::empty_regression(1, 1), 0.1).unwrap();
        let q = Points::from_scalars(&[-1.0, 0.0, 2.0]);
        let (m, v) = post.predict(&q).unwrap();
        assert!(m.iter().all(|&x| x == 0.25));
        assert!(v.iter().all(|&x| x == 2.0));
    }

    #[test]
    fn matches_textbook_implementation() {
        let xs = [-0.9, -0.6, 0.1, 0.55, 0.8];
        let ys = [0.3, -0.2, 0.9, 1.1, -0.4];
        let q = [-1.2, -0.3, 0.0, 0.7, 2.0];
        let prior = rbf_prior(1.3, 0.4);
        let ds = Dataset::regression(Points::from_scalars(&xs), Points::from_scalars(&ys)).unwrap();
        let mut p = prior.clone();
        p.jitter = JitterPolicy::none();
        let post = gp_regress(&p, &ds, 0.2).unwrap();
        let (m, v) = post.predict(&Points::from_scalars(&q)).unwrap();
        let (m2, v2) = dense_gp(&xs, &ys, &q, 1.3, 0.4, 0.2);
        for i in 0..q.len() {
            assert!((m[i] - m2[i]).abs() < 1e-8);
            assert!((v[i] - v2[i]).abs() < 1e-8);
            // posterior variance never exceeds prior variance
            assert!(v[i] <= 1.3 + 1e-12);
        }
    }

    #[test]
    fn scalar_log_marginal_closed_form() {
        let (s2, noise, y): (f64, f64, f64) = (1.7, 0.3, 0.8);
        let mut prior = rbf_prior(s2, 1.0);
        prior.jitter = JitterPolicy::none();
        let ds = Dataset::regression(Points::from_scalars(&[0.0]), Points::from_scalars(&[y])).unwrap();
        let got = log_marginal_likelihood(&prior, &ds, noise).unwrap();
        let total = s2 + noise * noise;
        let want = -0.5 * y * y / total - 0.5 * (2.0 * std::f64::consts::PI * total).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn zero_targets_maximize_the_quadratic_form() {
        let prior = rbf_prior(1.0, 0.5);
        let x = Points::from_scalars(&[0.0, 0.4, 1.0]);
        let zero = Dataset::regression(x.clone(), Points::from_scalars(&[0.0; 3])).unwrap();
        let other = Dataset::regression(x, Points::from_scalars(&[0.1, -0.3, 0.2])).unwrap();
        let a = log_marginal_terms(&prior, &zero, 0.1).unwrap();
        let b = log_marginal_terms(&prior, &other, 0.1).unwrap();
        assert_eq!(a.fit, 0.0);
        assert!(a.total() > b.total());
    }

    #[test]
    fn log_marginal_decomposes() {
        let ds = gen_sine(20, 0.1, 1).unwrap();
        let prior = rbf_prior(1.0, 0.3);
        let t = log_marginal_terms(&prior, &ds, 0.1).unwrap();
        let total = log_marginal_likelihood(&prior, &ds, 0.1).unwrap();
        assert!((t.fit + t.complexity + t.constant - total).abs() <= 1e-10);
    }

    #[test]
    fn grid_search_returns_best_candidate() {
        let ds = gen_sine(25, 0.1, 5).unwrap();
        let grid = HyperGrid {
            variances: vec![0.3, 1.0, 3.0],
            lengthscales: vec![0.05, 0.2, 0.8],
        };
        let base = Kernel::rbf(1.0, 1.0).unwrap();
        let sel = select_hyperparameters(&base, &PriorMean::zero(1), &ds, 0.1, &grid).unwrap();
        let mut best = f64::NEG_INFINITY;
        for &v in &grid.variances {
            for &l in &grid.lengthscales {
                best = best.max(log_marginal_likelihood(&rbf_prior(v, l), &ds, 0.1).unwrap());
            }
        }
        assert_eq!(sel.log_marginal, best);
    }

    #[test]
    fn tabulated_mean_interpolates() {
        let m = PriorMean::tabulated(vec![0.0, 1.0, 3.0], vec![0.0, 2.0, -2.0]).unwrap();
        let prior = GpPrior::new(
            m,
            MultiOutputKernel::replicated(Kernel::rbf(1.0, 1.0).unwrap(), 1).unwrap(),
            JitterPolicy::default(),
        )
        .unwrap();
        let v = prior.mean_at(&Points::from_scalars(&[-1.0, 0.5, 2.0, 5.0])).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 1.0, 0.0, -2.0]);
        assert!(PriorMean::tabulated(vec![1.0, 0.0], vec![0.0, 0.0]).is_err());
    }
}
