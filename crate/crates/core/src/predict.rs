//! Linearized predictive posterior, posterior function samples and evaluation metrics.
//!
//! Both posterior kinds expose a per-input factor `G(x)` (`O x r`) with predictive
//! covariance `G(x) G(x)^T`, so a linearized function sample is `f(x, w) + G(x) eps`
//! with `eps ~ N(0, I_r)` shared across inputs.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::DensePosterior;
use crate::data::{Dataset, Targets};
use crate::error::{Error, Result};
use crate::laplace::PosteriorFactors;
use crate::likelihood::{softmax, Likelihood};
use crate::nn::{MlpSpec, ParamVector};
use crate::points::Points;
use crate::train::stream_rng;

/// A Gaussian posterior over weights, seen through the linearized network.
pub trait LinearizedPosterior: Sync {
    fn spec(&self) -> &MlpSpec;
    fn map(&self) -> &ParamVector;
    /// Dimension of the noise vector driving samples.
    fn factor_rank(&self) -> usize;
    /// Network output at the MAP and `G(x)`.
    fn factor_at(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)>;
}

impl LinearizedPosterior for PosteriorFactors {
    fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn map(&self) -> &ParamVector {
        &self.map
    }

    fn factor_rank(&self) -> usize {
        self.rank()
    }

    fn factor_at(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let trace = self.spec.trace(&self.map, x)?;
        let g = self.spec.jvp_columns_traced(&self.map, &trace, &self.s)?;
        Ok((trace.output().to_vec(), g))
    }
}

impl LinearizedPosterior for DensePosterior {
    fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    fn map(&self) -> &ParamVector {
        &self.map
    }

    fn factor_rank(&self) -> usize {
        self.map.len()
    }

    /// `G(x) = (L^{-1} J(x)^T)^T` for `Lambda = L L^T`; samples are then `w + L^{-T} eps`.
    fn factor_at(&self, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let trace = self.spec.trace(&self.map, x)?;
        let o = self.spec.output_dim();
        let p = self.map.len();
        let mut jt = DMatrix::zeros(p, o);
        for k in 0..o {
            let mut e = vec![0.0; o];
            e[k] = 1.0;
            let mut g = vec![0.0; p];
            self.spec.vjp_traced(&self.map, &trace, &e, &mut g)?;
            jt.column_mut(k).copy_from_slice(&g);
        }
        let y = self
            .cholesky
            .l_dirty()
            .solve_lower_triangular(&jt)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        Ok((trace.output().to_vec(), y.transpose()))
    }
}

/// Predictive means (`n x O`) and per-input `O x O` covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    pub means: DMatrix<f64>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl PredictiveSummary {
    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.means.nrows() == 0
    }

    pub fn variance(&self, i: usize, output: usize) -> f64 {
        self.covariances[i][(output, output)]
    }

    pub fn std(&self, i: usize, output: usize) -> f64 {
        self.variance(i, output).sqrt()
    }
}

fn check_queries(post: &impl LinearizedPosterior, xs: &Points) -> Result<()> {
    if !xs.is_empty() && xs.dim() != post.spec().input_dim() {
        return Err(Error::shape(format!(
            "queries have dimension {}, network expects {}",
            xs.dim(),
            post.spec().input_dim()
        )));
    }
    Ok(())
}

/// Mean `f(x, w)` and covariance `J(x) Cov J(x)^T` at every query.
pub fn lin_predict(post: &impl LinearizedPosterior, xs: &Points) -> Result<PredictiveSummary> {
    check_queries(post, xs)?;
    let o = post.spec().output_dim();
    let per_point: Result<Vec<(Vec<f64>, DMatrix<f64>)>> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let (mean, g) = post.factor_at(xs.row(i))?;
            let mut cov = &g * g.transpose();
            cov = (&cov + cov.transpose()) * 0.5;
            for k in 0..o {
                // rounding can only push the diagonal below zero by a hair
                cov[(k, k)] = cov[(k, k)].max(0.0);
            }
            Ok((mean, cov))
        })
        .collect();
    let per_point = per_point?;
    let mut means = DMatrix::zeros(xs.len(), o);
    let mut covariances = Vec::with_capacity(xs.len());
    for (i, (m, c)) in per_point.into_iter().enumerate() {
        means.row_mut(i).copy_from_slice(&m);
        covariances.push(c);
    }
    Ok(PredictiveSummary { means, covariances })
}

/// Linearized function samples; `values[s]` is `n x O`.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionSamples {
    pub values: Vec<DMatrix<f64>>,
}

impl FunctionSamples {
    pub fn num_samples(&self) -> usize {
        self.values.len()
    }
}

/// Samples driven by explicit noise columns (`rank x n_samples`).
pub fn samples_from_noise(post: &impl LinearizedPosterior, xs: &Points, noise: &DMatrix<f64>) -> Result<FunctionSamples> {
    check_queries(post, xs)?;
    if noise.nrows() != post.factor_rank() {
        return Err(Error::shape("noise rows differ from the posterior rank"));
    }
    let o = post.spec().output_dim();
    let s = noise.ncols();
    let per_point: Result<Vec<DMatrix<f64>>> = (0..xs.len())
        .into_par_iter()
        .map(|i| {
            let (mean, g) = post.factor_at(xs.row(i))?;
            let mut out = &g * noise;
            for k in 0..o {
                out.row_mut(k).add_scalar_mut(mean[k]);
            }
            Ok(out)
        })
        .collect();
    let per_point = per_point?;
    let values = (0..s)
        .map(|j| DMatrix::from_fn(xs.len(), o, |i, k| per_point[i][(k, j)]))
        .collect();
    Ok(FunctionSamples { values })
}

/// Standard-normal noise for `n_samples` draws; sample `j` uses its own seeded stream.
pub fn sample_noise(rank: usize, n_samples: usize, seed: u64) -> DMatrix<f64> {
    let mut noise = DMatrix::zeros(rank, n_samples);
    for j in 0..n_samples {
        let mut rng = stream_rng(seed, j as u64);
        for i in 0..rank {
            noise[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    noise
}

pub fn sample_posterior(post: &impl LinearizedPosterior, xs: &Points, n_samples: usize, seed: u64) -> Result<FunctionSamples> {
    if n_samples == 0 {
        return Err(Error::config("need at least one posterior sample"));
    }
    samples_from_noise(post, xs, &sample_noise(post.factor_rank(), n_samples, seed))
}

/// Monte Carlo class probabilities `E[softmax(f)]`, `n x O`.
pub fn predictive_probabilities(
    post: &impl LinearizedPosterior,
    xs: &Points,
    n_samples: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let samples = sample_posterior(post, xs, n_samples, seed)?;
    let o = post.spec().output_dim();
    let mut probs = DMatrix::zeros(xs.len(), o);
    for s in &samples.values {
        for i in 0..xs.len() {
            let row: Vec<f64> = s.row(i).iter().copied().collect();
            for (k, p) in softmax(&row).into_iter().enumerate() {
                probs[(i, k)] += p;
            }
        }
    }
    Ok(probs / n_samples as f64)
}

/// Mean over data of the Monte Carlo average of `log p(y | f_sample(x))`.
pub fn expected_log_likelihood(
    post: &impl LinearizedPosterior,
    likelihood: &Likelihood,
    data: &Dataset,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("expected log-likelihood of an empty dataset"));
    }
    let samples = sample_posterior(post, data.inputs(), n_samples, seed)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let mut acc = 0.0;
        for s in &samples.values {
            let f: Vec<f64> = s.row(i).iter().copied().collect();
            acc -= likelihood.nll(data.observation(i), &f)?;
        }
        total += acc / n_samples as f64;
    }
    Ok(total / data.len() as f64)
}

/// Top-label expected calibration error with equal-width confidence bins.
pub fn ece(probabilities: &DMatrix<f64>, labels: &[usize], n_bins: usize) -> Result<f64> {
    let n = probabilities.nrows();
    if n == 0 {
        return Err(Error::config("calibration error of an empty dataset"));
    }
    if labels.len() != n {
        return Err(Error::shape("one label per probability row is required"));
    }
    if n_bins == 0 {
        return Err(Error::config("need at least one bin"));
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..n {
        let row = probabilities.row(i);
        if (row.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probability row {i} does not sum to one")));
        }
        let (pred, conf) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (k, &p)| {
            if p > best.1 {
                (k, p)
            } else {
                best
            }
        });
        let bin = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        conf_sum[bin] += conf;
        count[bin] += 1;
        correct[bin] += usize::from(pred == labels[i]);
    }
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n as f64) * (correct[b] as f64 / c - conf_sum[b] / c).abs()
        })
        .sum())
}

pub fn accuracy(probabilities: &DMatrix<f64>, labels: &[usize]) -> f64 {
    let hits = (0..probabilities.nrows())
        .filter(|&i| probabilities.row(i).transpose().argmax().0 == labels[i])
        .count();
    hits as f64 / probabilities.nrows().max(1) as f64
}

pub fn entropy(probabilities: &[f64]) -> f64 {
    -probabilities.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Single-threshold detector: scores above `threshold` are flagged out-of-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stump {
    pub threshold: f64,
    /// Balanced accuracy `(TPR + TNR) / 2`.
    pub accuracy: f64,
}

/// Scans the midpoints of the sorted unique scores (plus one threshold below all of them)
/// and keeps the first threshold with the best balanced accuracy.
pub fn ood_stump(scores_id: &[f64], scores_ood: &[f64]) -> Result<Stump> {
    if scores_id.is_empty() || scores_ood.is_empty() {
        return Err(Error::config("OOD stump needs scores on both sides"));
    }
    if scores_id.iter().chain(scores_ood).any(|s| !s.is_finite()) {
        return Err(Error::Domain("non-finite OOD score".into()));
    }
    let mut tagged: Vec<(f64, bool)> = scores_id
        .iter()
        .map(|&s| (s, false))
        .chain(scores_ood.iter().map(|&s| (s, true)))
        .collect();
    tagged.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (n_id, n_ood) = (scores_id.len() as f64, scores_ood.len() as f64);
    // threshold below everything: all flagged OOD
    let mut id_below = 0usize;
    let mut ood_below = 0usize;
    let score = |id_below: usize, ood_below: usize| {
        0.5 * (id_below as f64 / n_id + (n_ood - ood_below as f64) / n_ood)
    };
    let mut best = Stump {
        threshold: tagged[0].0 - 1.0,
        accuracy: score(0, 0),
    };
    let mut i = 0;
    while i < tagged.len() {
        let v = tagged[i].0;
        while i < tagged.len() && tagged[i].0 == v {
            if tagged[i].1 {
                ood_below += 1;
            } else {
                id_below += 1;
            }
            i += 1;
        }
        let threshold = if i < tagged.len() { 0.5 * (v + tagged[i].0) } else { v };
        let acc = score(id_below, ood_below);
        if acc > best.accuracy {
            best = Stump { threshold, accuracy: acc };
        }
    }
    Ok(best)
}

/// Headline metrics of one evaluated method.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub method: String,
    pub expected_log_likelihood: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ood_accuracy: Option<f64>,
    /// Predictive entropy (classification) or total predictive variance (regression) per test point.
    #[serde(skip)]
    pub per_point_uncertainty: Vec<f64>,
}

impl MetricReport {
    pub fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("expected_log_likelihood", self.expected_log_likelihood)];
        for (k, v) in [
            ("mse", self.mse),
            ("accuracy", self.accuracy),
            ("ece", self.ece),
            ("ood_accuracy", self.ood_accuracy),
        ] {
            if let Some(v) = v {
                out.push((k, v));
            }
        }
        out
    }

    pub fn write_csv_rows<W: Write>(&self, mut out: W) -> Result<()> {
        for (k, v) in self.scalars() {
            writeln!(out, "{},{k},{v:.16e}", self.method)?;
        }
        Ok(())
    }
}

/// Per-point uncertainty scores used for OOD detection.
pub fn uncertainty_scores(post: &impl LinearizedPosterior, likelihood: &Likelihood, xs: &Points, n_samples: usize, seed: u64) -> Result<Vec<f64>> {
    if likelihood.is_classification() {
        let probs = predictive_probabilities(post, xs, n_samples, seed)?;
        Ok((0..xs.len())
            .map(|i| entropy(&probs.row(i).iter().copied().collect::<Vec<_>>()))
            .collect())
    } else {
        let pred = lin_predict(post, xs)?;
        Ok(pred.covariances.iter().map(|c| c.trace()).collect())
    }
}

/// Evaluates expected log-likelihood and the task's metrics on `test`, and the OOD stump
/// when out-of-distribution inputs are given.
pub fn evaluate(
    method: &str,
    post: &impl LinearizedPosterior,
    likelihood: &Likelihood,
    test: &Dataset,
    ood_inputs: Option<&Points>,
    n_samples: usize,
    seed: u64,
) -> Result<MetricReport> {
    let mut report = MetricReport {
        method: method.to_string(),
        expected_log_likelihood: expected_log_likelihood(post, likelihood, test, n_samples, seed)?,
        ..MetricReport::default()
    };
    match test.targets() {
        Targets::Real(y) => {
            let pred = lin_predict(post, test.inputs())?;
            let diff = &pred.means - DMatrix::from_row_slice(y.len(), y.dim(), y.as_slice());
            report.mse = Some(diff.norm_squared() / diff.len() as f64);
        }
        Targets::Class { labels, .. } => {
            let probs = predictive_probabilities(post, test.inputs(), n_samples, seed)?;
            report.accuracy = Some(accuracy(&probs, labels));
            report.ece = Some(ece(&probs, labels, 10)?);
        }
    }
    report.per_point_uncertainty = uncertainty_scores(post, likelihood, test.inputs(), n_samples, seed)?;
    if let Some(ood) = ood_inputs {
        let ood_scores = uncertainty_scores(post, likelihood, ood, n_samples, seed)?;
        report.ood_accuracy = Some(ood_stump(&report.per_point_uncertainty, &ood_scores)?.accuracy);
    }
    Ok(report)
}

/// Marginal predictive standard deviation of output `o` at each query.
pub fn marginal_std(pred: &PredictiveSummary, output: usize) -> DVector<f64> {
    DVector::from_fn(pred.len(), |i, _| pred.std(i, output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{laplace_ws, IsotropicPrior};
    use crate::data::{gen_sine, gen_two_moons};
    use crate::nn::Activation;

    fn rank_zero(spec: &MlpSpec) -> PosteriorFactors {
        PosteriorFactors {
            spec: spec.clone(),
            map: spec.init_params(1),
            s: DMatrix::zeros(spec.num_params(), 0),
            eigenvalues: vec![],
            truncation: 0,
            projected_rank: 0,
            context: Points::from_scalars(&[0.0]),
        }
    }

    fn random_factors(spec: &MlpSpec, rank: usize) -> PosteriorFactors {
        let mut rng = stream_rng(3, 0);
        PosteriorFactors {
            s: DMatrix::from_fn(spec.num_params(), rank, |_, _| 0.3 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)),
            eigenvalues: vec![1.0; rank],
            projected_rank: rank,
            ..rank_zero(spec)
        }
    }

    #[test]
    fn rank_zero_posterior_predicts_the_network() {
        let spec = MlpSpec::tanh(1, &[5], 2).unwrap();
        let post = rank_zero(&spec);
        let xs = Points::from_scalars(&[-1.0, 0.5]);
        let pred = lin_predict(&post, &xs).unwrap();
        assert_eq!(pred.means, spec.forward(&post.map, &xs).unwrap());
        assert!(pred.covariances.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scalar_conjugate_variance() {
        let spec = MlpSpec::new(vec![1, 1], Activation::Identity).unwrap();
        let w = ParamVector::from_vec(vec![0.0, 0.1]);
        let (sp, sn): (f64, f64) = (1.3, 0.4);
        let data = Dataset::regression(Points::from_scalars(&[0.0]), Points::from_scalars(&[0.2])).unwrap();
        let dense = laplace_ws(&spec, &w, &IsotropicPrior::new(sp).unwrap(), &data, &Likelihood::gaussian(sn).unwrap()).unwrap();
        let pred = lin_predict(&dense, &Points::from_scalars(&[0.0])).unwrap();
        let want = 1.0 / (1.0 / (sp * sp) + 1.0 / (sn * sn));
        assert!((pred.variance(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn covariances_are_symmetric_psd() {
        let spec = MlpSpec::tanh(2, &[6], 3).unwrap();
        let post = random_factors(&spec, 5);
        let xs = Points::new(2, (0..20).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for c in lin_predict(&post, &xs).unwrap().covariances {
            assert_eq!(c, c.transpose());
            assert!(nalgebra::SymmetricEigen::new(c).eigenvalues.min() >= -1e-10);
        }
    }

    #[test]
    fn zero_noise_samples_are_the_mean() {
        let spec = MlpSpec::tanh(1, &[4], 1).unwrap();
        let post = random_factors(&spec, 3);
        let xs = Points::from_scalars(&[0.0, 1.0]);
        let s = samples_from_noise(&post, &xs, &DMatrix::zeros(3, 2)).unwrap();
        let mean = spec.forward(&post.map, &xs).unwrap();
        assert!(s.values.iter().all(|v| *v == mean));
    }

    #[test]
    fn sample_variance_matches_prediction() {
        let spec = MlpSpec::tanh(1, &[4], 1).unwrap();
        let post = random_factors(&spec, 4);
        let xs = Points::from_scalars(&[0.3]);
        let n = 100_000;
        let s = sample_posterior(&post, &xs, n, 11).unwrap();
        let pred = lin_predict(&post, &xs).unwrap();
        let m = pred.means[(0, 0)];
        let var = s.values.iter().map(|v| (v[(0, 0)] - m).powi(2)).sum::<f64>() / n as f64;
        let want = pred.variance(0, 0);
        let se = want * (2.0 / n as f64).sqrt();
        assert!((var - want).abs() <= 3.0 * se, "{var} vs {want}");
        assert_eq!(s, sample_posterior(&post, &xs, n, 11).unwrap());
    }

    #[test]
    fn dense_samples_match_dense_covariance() {
        let spec = MlpSpec::tanh(1, &[3], 1).unwrap();
        let w = spec.init_params(2);
        let data = gen_sine(8, 0.1, 1).unwrap();
        let dense = laplace_ws(&spec, &w, &IsotropicPrior::default(), &data, &Likelihood::gaussian(0.3).unwrap()).unwrap();
        let xs = Points::from_scalars(&[0.7]);
        let j = spec.jacobian(&w, &xs).unwrap().matrix;
        let want = (&j * dense.covariance() * j.transpose())[(0, 0)];
        let got = lin_predict(&dense, &xs).unwrap().variance(0, 0);
        assert!((got - want).abs() <= 1e-10 * want.max(1.0));
    }

    #[test]
    fn ell_without_uncertainty_is_exact() {
        let spec = MlpSpec::tanh(1, &[4], 1).unwrap();
        let post = rank_zero(&spec);
        let data = gen_sine(10, 0.1, 2).unwrap();
        let lik = Likelihood::gaussian(0.2).unwrap();
        let ell = expected_log_likelihood(&post, &lik, &data, 10, 0).unwrap();
        let want = -crate::train::mean_nll(&spec, &post.map, &lik, &data).unwrap();
        assert!((ell - want).abs() < 1e-12);
    }

    #[test]
    fn ell_of_uniform_logits_is_minus_log_classes() {
        let spec = MlpSpec::new(vec![2, 3], Activation::Identity).unwrap();
        let post = PosteriorFactors {
            map: ParamVector::zeros(spec.num_params()),
            ..rank_zero(&spec)
        };
        let data = Dataset::classification(Points::new(2, vec![0.1, 0.2, -1.0, 3.0]).unwrap(), vec![0, 2], 3).unwrap();
        let ell = expected_log_likelihood(&post, &Likelihood::categorical(3).unwrap(), &data, 5, 0).unwrap();
        assert!((ell + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ell_agrees_with_a_long_run() {
        let spec = MlpSpec::tanh(2, &[4], 2).unwrap();
        let post = random_factors(&spec, 3);
        let data = gen_two_moons(4, 0.1, 1).unwrap();
        let lik = Likelihood::categorical(2).unwrap();
        let n_ref = 200_000;
        let reference = expected_log_likelihood(&post, &lik, &data, n_ref, 1).unwrap();
        // standard error from the per-sample spread of the data-averaged log-likelihood
        let samples = sample_posterior(&post, data.inputs(), 2000, 2).unwrap();
        let per_sample: Vec<f64> = samples
            .values
            .iter()
            .map(|s| {
                (0..data.len())
                    .map(|i| -lik.nll(data.observation(i), &s.row(i).iter().copied().collect::<Vec<_>>()).unwrap())
                    .sum::<f64>()
                    / data.len() as f64
            })
            .collect();
        let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        let sd = (per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (per_sample.len() - 1) as f64).sqrt();
        let n = 1000;
        let est = expected_log_likelihood(&post, &lik, &data, n, 5).unwrap();
        assert!((est - reference).abs() <= 3.0 * sd / (n as f64).sqrt() + 3.0 * sd / (n_ref as f64).sqrt());
    }

    #[test]
    fn probabilities_lie_in_the_simplex() {
        let spec = MlpSpec::tanh(2, &[5], 3).unwrap();
        let post = random_factors(&spec, 4);
        let xs = Points::new(2, vec![0.0, 0.0, 3.0, -2.0, 10.0, 10.0]).unwrap();
        let p = predictive_probabilities(&post, &xs, 50, 0).unwrap();
        for i in 0..3 {
            assert!((p.row(i).sum() - 1.0).abs() <= 1e-9);
            assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ece_examples() {
        let confident = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(ece(&confident, &[0, 1], 10).unwrap(), 0.0);
        let p = DMatrix::from_row_slice(4, 2, &[0.8, 0.2, 0.8, 0.2, 0.8, 0.2, 0.8, 0.2]);
        assert!((ece(&p, &[0, 0, 1, 1], 10).unwrap() - 0.3).abs() < 1e-12);
        assert!(ece(&DMatrix::zeros(0, 2), &[], 10).is_err());
        assert!(ece(&DMatrix::from_row_slice(1, 2, &[0.5, 0.6]), &[0], 10).is_err());
    }

    fn brute_force_stump(id: &[f64], ood: &[f64]) -> f64 {
        let mut all: Vec<f64> = id.iter().chain(ood).copied().collect();
        all.sort_by(f64::total_cmp);
        let mut cands = vec![all[0] - 1.0];
        cands.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        cands.push(*all.last().unwrap());
        cands
            .into_iter()
            .map(|t| {
                let tnr = id.iter().filter(|&&s| s <= t).count() as f64 / id.len() as f64;
                let tpr = ood.iter().filter(|&&s| s > t).count() as f64 / ood.len() as f64;
                0.5 * (tnr + tpr)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn stump_examples() {
        let s = ood_stump(&[0.1, 0.2, 0.3], &[1.0, 2.0]).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!(s.threshold > 0.3 && s.threshold < 1.0);

        let mut rng = stream_rng(8, 0);
        let id: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let ood: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = ood_stump(&id, &ood).unwrap();
        assert!(s.accuracy <= 0.6);
        assert!((s.accuracy - brute_force_stump(&id, &ood)).abs() < 1e-12);

        let id: Vec<f64> = (0..60).map(|i| ((i * 7) % 13) as f64).collect();
        let ood: Vec<f64> = (0..40).map(|i| ((i * 5) % 17) as f64 + 2.0).collect();
        assert!((ood_stump(&id, &ood).unwrap().accuracy - brute_force_stump(&id, &ood)).abs() < 1e-12);
        assert!(ood_stump(&[], &[1.0]).is_err());
    }

    #[test]
    fn metric_report_serializes() {
        let r = MetricReport {
            method: "fsp".into(),
            expected_log_likelihood: -0.5,
            accuracy: Some(0.9),
            ..MetricReport::default()
        };
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(json, r#"{"method":"fsp","expected_log_likelihood":-0.5,"accuracy":0.9}"#);
        let mut buf = Vec::new();
        r.write_csv_rows(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "fsp,expected_log_likelihood,-5.0000000000000000e-1\nfsp,accuracy,9.0000000000000002e-1\n"
        );
    }
}
