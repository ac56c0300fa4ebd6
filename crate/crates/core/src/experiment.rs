//! Experiment orchestration and artifact emission.
//!
//! Every run writes into its output directory:
//!
//! | file              | content                                                          |
//! |-------------------|------------------------------------------------------------------|
//! | `config.toml`     | the configuration text the run was started with                  |
//! | `train_log.csv`   | `step,nll_term,reg_term,objective` of the function-space MAP run   |
//! | `predictions.csv` | `method,x0[,x1],output,mean,std` on the prediction grid           |
//! | `samples.csv`     | `method,sample,x0[,x1],output,value` posterior function samples   |
//! | `metrics.json`    | flat `"method.metric": value` object                              |
//! | `metrics.csv`     | `method,metric,value`                                             |
//! | `plot.svg`        | mean, 2-std band, samples and data per method                     |
//!
//! Ablations write one subdirectory per setting plus `ablation.csv`; `oracle-blr` writes
//! `oracle.csv`. For classification, predictions are Monte Carlo mean and std of the class
//! probabilities, samples are latent function values. Floats are printed with 17
//! significant digits. On failure the error names its stage and everything the run
//! created is removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::baselines::{laplace_ws, train_map_ws, IsotropicPrior};
use crate::config::{ExperimentConfig, TaskKind};
use crate::context::ContextSampler;
use crate::data::{gen_linear_features, gen_sine, gen_two_moons, Dataset, Targets};
use crate::error::{Error, Result};
use crate::gp::{gp_regress, select_hyperparameters, GpPrior, PriorMean};
use crate::kernels::{Kernel, MultiOutputKernel};
use crate::laplace::{
    fit_laplace, null_space_diagnostic, read_posterior, write_posterior, LaplaceFit, NullSpaceReport, PosteriorFactors,
};
use crate::likelihood::{softmax, Likelihood};
use crate::nn::{read_checkpoint, write_checkpoint, Activation, MlpSpec, ParamVector};
use crate::plot::{render, BandPanel, HeatmapPanel, Panel};
use crate::points::Points;
use crate::predict::{evaluate, lin_predict, ood_stump, sample_posterior, LinearizedPosterior, MetricReport};
use crate::train::{stream_rng, train_map, Regularizer, TrainOutcome};

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(name))
    }
}

/// Files and directories created by a run, removed again if the run fails.
#[derive(Debug)]
pub struct Artifacts {
    dir: PathBuf,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> Result<Self> {
        let mut a = Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            dirs: Vec::new(),
        };
        a.ensure_dir(dir)?;
        Ok(a)
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        fs::create_dir_all(dir)?;
        self.dirs.extend(missing.into_iter().rev());
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path of `name` inside a subdirectory, creating it.
    pub fn subdir(&mut self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        self.ensure_dir(&d)?;
        Ok(d)
    }

    pub fn write(&mut self, relative: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.dir.join(relative);
        fs::write(&path, contents)?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Removes everything this run created, newest first.
    pub fn discard(self) {
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

/// Runs `f` on a dedicated pool; `0` threads means one thread.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Train, validation, test and out-of-distribution inputs of a task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
    pub ood: Option<Points>,
}

fn seed_for(cfg: &ExperimentConfig, offset: u64) -> u64 {
    cfg.seed.wrapping_mul(7919).wrapping_add(offset)
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    let d = &cfg.data;
    let (train, validation, test) = match cfg.base_task() {
        TaskKind::TwoMoons => (
            gen_two_moons(d.n_train, d.noise, seed_for(cfg, 0))?,
            (d.n_validation >= 2)
                .then(|| gen_two_moons(d.n_validation, d.noise, seed_for(cfg, 1)))
                .transpose()?,
            gen_two_moons(d.n_test, d.noise, seed_for(cfg, 2))?,
        ),
        TaskKind::OracleBlr => {
            let (train, _) = gen_linear_features(d.n_train, d.features, d.noise, seed_for(cfg, 0))?;
            let (test, _) = gen_linear_features(d.n_test, d.features, d.noise, seed_for(cfg, 2))?;
            (train, None, test)
        }
        _ => (
            gen_sine(d.n_train, d.noise, seed_for(cfg, 0))?,
            (d.n_validation > 0)
                .then(|| gen_sine(d.n_validation, d.noise, seed_for(cfg, 1)))
                .transpose()?,
            gen_sine(d.n_test, d.noise, seed_for(cfg, 2))?,
        ),
    };
    let ood = cfg.eval.ood.then(|| ood_inputs(cfg, d.n_test)).transpose()?;
    Ok(TaskData {
        train,
        validation,
        test,
        ood,
    })
}

/// Sine: `|x|` uniform on `[2, 3.5]`. Two-moons: a ring of radius 3.5 around the origin.
fn ood_inputs(cfg: &ExperimentConfig, n: usize) -> Result<Points> {
    let mut rng = stream_rng(seed_for(cfg, 3), 0);
    match cfg.base_task() {
        TaskKind::TwoMoons => {
            let mut pts = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                pts.push(3.5 * t.cos());
                pts.push(3.5 * t.sin());
            }
            Points::new(2, pts)
        }
        TaskKind::OracleBlr => Ok(gen_linear_features(n, cfg.data.features, 0.0, seed_for(cfg, 3))?
            .0
            .inputs()
            .select(&(0..n).collect::<Vec<_>>())),
        _ => Ok(Points::from_scalars(
            &(0..n)
                .map(|_| {
                    let m = rng.random_range(2.0..=3.5);
                    if rng.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect::<Vec<_>>(),
        )),
    }
}

pub fn likelihood_for(cfg: &ExperimentConfig) -> Result<Likelihood> {
    if cfg.is_classification() {
        Likelihood::categorical(cfg.output_dim())
    } else {
        Likelihood::gaussian(cfg.likelihood.noise_std)
    }
}

/// The prior of a run, with hyperparameters selected on `train` when configured.
pub fn prior_for(cfg: &ExperimentConfig, kernel: Kernel, train: &Dataset) -> Result<GpPrior> {
    let kernel = if cfg.prior.select_hyperparameters {
        let mean = PriorMean::constant(cfg.prior.mean, cfg.output_dim());
        let sel = select_hyperparameters(&kernel, &mean, train, cfg.likelihood.noise_std, &cfg.hyper_grid())?;
        log::info!("selected kernel {} (log marginal {:.4})", sel.kernel, sel.log_marginal);
        sel.kernel
    } else {
        kernel
    };
    cfg.prior_for(kernel)
}

pub fn train_fsp(cfg: &ExperimentConfig, spec: &MlpSpec, prior: &GpPrior, data: &TaskData) -> Result<TrainOutcome> {
    train_map(
        spec,
        spec.init_params(seed_for(cfg, 4)),
        likelihood_for(cfg)?,
        &data.train,
        data.validation.as_ref(),
        &Regularizer::Function {
            prior: prior.clone(),
            sampler: cfg.train_sampler(),
        },
        &cfg.train,
    )
}

pub fn covariance_context(cfg: &ExperimentConfig) -> Result<Points> {
    cfg.covariance_sampler()
        .sample_seeded(cfg.covariance_points(), seed_for(cfg, 5))
}

pub fn prediction_grid(cfg: &ExperimentConfig) -> Result<Points> {
    let (lo, hi) = cfg.grid_box();
    ContextSampler::Grid {
        lo,
        hi,
        per_dim: cfg.grid_points(),
    }
    .sample_seeded(0, 0)
}

/// Largest amount by which a posterior variance at the context points exceeds the prior's.
pub fn context_variance_excess(post: &PosteriorFactors, prior: &GpPrior) -> Result<f64> {
    let var = post.marginal_variances(&post.context)?;
    let prior_var = prior.kernel.diag(&post.context);
    Ok(var
        .iter()
        .zip(prior_var.iter())
        .map(|(v, p)| v - p)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mean squared second difference of each sample along a 1-D grid, averaged over samples.
pub fn roughness(samples: &[DMatrix<f64>]) -> f64 {
    let per: Vec<f64> = samples
        .iter()
        .filter(|s| s.nrows() >= 3)
        .map(|s| {
            let c = s.column(0);
            (1..c.len() - 1)
                .map(|i| (c[i + 1] - 2.0 * c[i] + c[i - 1]).powi(2))
                .sum::<f64>()
                / (c.len() - 2) as f64
        })
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

/// Predictions of one method on the grid.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub name: String,
    pub mean: DMatrix<f64>,
    pub std: DMatrix<f64>,
    pub samples: Vec<DMatrix<f64>>,
    pub metrics: MetricReport,
    pub extra: Vec<(String, f64)>,
}

fn probability_summary(samples: &[DMatrix<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, o) = samples[0].shape();
    let mut mean = DMatrix::<f64>::zeros(n, o);
    let mut sq = DMatrix::<f64>::zeros(n, o);
    for s in samples {
        for i in 0..n {
            let p = softmax(&s.row(i).iter().copied().collect::<Vec<_>>());
            for k in 0..o {
                mean[(i, k)] += p[k];
                sq[(i, k)] += p[k] * p[k];
            }
        }
    }
    let count = samples.len() as f64;
    mean /= count;
    let std = DMatrix::from_fn(n, o, |i, k| (sq[(i, k)] / count - mean[(i, k)].powi(2)).max(0.0).sqrt());
    (mean, std)
}

fn linearized_output(
    cfg: &ExperimentConfig,
    name: &str,
    post: &impl LinearizedPosterior,
    likelihood: &Likelihood,
    data: &TaskData,
    grid: &Points,
) -> Result<MethodOutput> {
    let seed = seed_for(cfg, 6);
    let metrics = evaluate(
        name,
        post,
        likelihood,
        &data.test,
        data.ood.as_ref(),
        cfg.eval.metric_samples,
        seed,
    )?;
    let (mean, std) = if likelihood.is_classification() {
        probability_summary(&sample_posterior(post, grid, cfg.eval.plot_samples, seed)?.values)
    } else {
        let pred = lin_predict(post, grid)?;
        let o = pred.means.ncols();
        let std = DMatrix::from_fn(pred.len(), o, |i, k| pred.std(i, k));
        (pred.means, std)
    };
    let samples = if cfg.eval.trace_samples > 0 {
        sample_posterior(post, grid, cfg.eval.trace_samples, seed)?.values
    } else {
        Vec::new()
    };
    Ok(MethodOutput {
        name: name.to_string(),
        mean,
        std,
        samples,
        metrics,
        extra: Vec::new(),
    })
}

fn gp_output(cfg: &ExperimentConfig, prior: &GpPrior, data: &TaskData, grid: &Points) -> Result<MethodOutput> {
    let noise = cfg.likelihood.noise_std;
    let gp = gp_regress(prior, &data.train, noise)?;
    let (mean, var) = gp.predict(grid)?;
    let (tm, tv) = gp.predict(data.test.inputs())?;
    let y = match data.test.targets() {
        Targets::Real(y) => y.as_slice().to_vec(),
        Targets::Class { .. } => return Err(Error::config("GP baseline needs regression data")),
    };
    let s2 = noise * noise;
    let n = y.len() as f64;
    // E log N(y | f, s2) under f ~ N(m, v)
    let ell = y
        .iter()
        .enumerate()
        .map(|(i, &yi)| -0.5 * (2.0 * std::f64::consts::PI * s2).ln() - ((yi - tm[i]).powi(2) + tv[i]) / (2.0 * s2))
        .sum::<f64>()
        / n;
    let mse = y.iter().enumerate().map(|(i, &yi)| (yi - tm[i]).powi(2)).sum::<f64>() / n;
    let mut metrics = MetricReport {
        method: "gp".into(),
        expected_log_likelihood: ell,
        mse: Some(mse),
        per_point_uncertainty: tv.iter().copied().collect(),
        ..MetricReport::default()
    };
    if let Some(ood) = &data.ood {
        let (_, ov) = gp.predict(ood)?;
        metrics.ood_accuracy = Some(ood_stump(&metrics.per_point_uncertainty, ov.as_slice())?.accuracy);
    }
    let o = prior.outputs();
    Ok(MethodOutput {
        name: "gp".into(),
        mean: DMatrix::from_row_slice(grid.len(), o, mean.as_slice()),
        std: DMatrix::from_row_slice(grid.len(), o, var.map(|v| v.max(0.0).sqrt()).as_slice()),
        samples: Vec::new(),
        metrics,
        extra: Vec::new(),
    })
}

fn predictions_csv(grid: &Points, methods: &[MethodOutput]) -> String {
    let mut s = String::from("method");
    for d in 0..grid.dim() {
        let _ = write!(s, ",x{d}");
    }
    s.push_str(",output,mean,std\n");
    for m in methods {
        for i in 0..grid.len() {
            for k in 0..m.mean.ncols() {
                s.push_str(&m.name);
                for &x in grid.row(i) {
                    let _ = write!(s, ",{}", fmt(x));
                }
                let _ = writeln!(s, ",{k},{},{}", fmt(m.mean[(i, k)]), fmt(m.std[(i, k)]));
            }
        }
    }
    s
}

fn samples_csv(grid: &Points, methods: &[MethodOutput]) -> String {
    let mut s = String::from("method,sample");
    for d in 0..grid.dim() {
        let _ = write!(s, ",x{d}");
    }
    s.push_str(",output,value\n");
    for m in methods {
        for (j, sample) in m.samples.iter().enumerate() {
            for i in 0..grid.len() {
                for k in 0..sample.ncols() {
                    let _ = write!(s, "{},{j}", m.name);
                    for &x in grid.row(i) {
                        let _ = write!(s, ",{}", fmt(x));
                    }
                    let _ = writeln!(s, ",{k},{}", fmt(sample[(i, k)]));
                }
            }
        }
    }
    s
}

fn metric_entries(methods: &[MethodOutput]) -> Vec<(String, String, f64)> {
    let mut rows = Vec::new();
    for m in methods {
        for (k, v) in m.metrics.scalars() {
            rows.push((m.name.clone(), k.to_string(), v));
        }
        for (k, v) in &m.extra {
            rows.push((m.name.clone(), k.clone(), *v));
        }
    }
    rows
}

fn metrics_json(task: &str, rows: &[(String, String, f64)]) -> String {
    let mut map = BTreeMap::new();
    map.insert("task".to_string(), serde_json::Value::from(task));
    for (m, k, v) in rows {
        map.insert(format!("{m}.{k}"), serde_json::Value::from(*v));
    }
    let mut s = serde_json::to_string_pretty(&map).expect("metrics serialize");
    s.push('\n');
    s
}

fn metrics_csv(rows: &[(String, String, f64)]) -> String {
    let mut s = String::from("method,metric,value\n");
    for (m, k, v) in rows {
        let _ = writeln!(s, "{m},{k},{}", fmt(*v));
    }
    s
}

fn panels(grid: &Points, train: &Dataset, methods: &[MethodOutput], classification: bool) -> Vec<Panel> {
    if grid.dim() == 1 {
        let xs: Vec<f64> = grid.as_slice().to_vec();
        let data: Vec<(f64, f64)> = match train.targets() {
            Targets::Real(y) => (0..train.len()).map(|i| (train.inputs().row(i)[0], y.row(i)[0])).collect(),
            Targets::Class { .. } => Vec::new(),
        };
        return methods
            .iter()
            .map(|m| {
                Panel::Band(BandPanel {
                    title: m.name.clone(),
                    xs: xs.clone(),
                    mean: m.mean.column(0).iter().copied().collect(),
                    std: m.std.column(0).iter().copied().collect(),
                    samples: m.samples.iter().map(|s| s.column(0).iter().copied().collect()).collect(),
                    data: data.clone(),
                })
            })
            .collect();
    }
    if grid.dim() != 2 {
        return Vec::new();
    }
    let per = (grid.len() as f64).sqrt().round() as usize;
    let lo = [grid.row(0)[0], grid.row(0)[1]];
    let hi = [grid.row(grid.len() - 1)[0], grid.row(grid.len() - 1)[1]];
    let data: Vec<(f64, f64, usize)> = match train.targets() {
        Targets::Class { labels, .. } => (0..train.len())
            .map(|i| (train.inputs().row(i)[0], train.inputs().row(i)[1], labels[i]))
            .collect(),
        Targets::Real(_) => Vec::new(),
    };
    let k = if classification { 1.min(methods.first().map_or(0, |m| m.mean.ncols() - 1)) } else { 0 };
    let mut out = Vec::new();
    for m in methods {
        for (what, values) in [("mean", &m.mean), ("std", &m.std)] {
            out.push(Panel::Heatmap(HeatmapPanel {
                title: format!("{} {what} p(class {k})", m.name),
                nx: per,
                ny: per,
                lo,
                hi,
                values: values.column(k).iter().copied().collect(),
                data: data.clone(),
            }));
        }
    }
    out
}

/// Summary of one predictive run, used by the ablations and tests.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub fit: LaplaceFit,
    pub prior: GpPrior,
    pub methods: Vec<MethodOutput>,
    pub grid: Points,
    pub data: TaskData,
    pub context_excess: f64,
}

impl RunSummary {
    pub fn method(&self, name: &str) -> Option<&MethodOutput> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Trains, fits and evaluates one predictive task, writing its artifacts under `sub`.
fn predictive_run(cfg: &ExperimentConfig, kernel: Kernel, art: &mut Artifacts, sub: &str) -> Result<RunSummary> {
    let data = generate_data(cfg).stage("data")?;
    let prior = prior_for(cfg, kernel, &data.train).stage("prior")?;
    let spec = cfg.mlp().stage("model")?;
    let trained = train_fsp(cfg, &spec, &prior, &data).stage("train")?;
    let context = covariance_context(cfg).stage("context")?;
    let fit = fit_laplace(
        &spec,
        &trained.params,
        &prior,
        &data.train,
        &trained.likelihood,
        &context,
        &cfg.lanczos,
    )
    .stage("laplace")?;
    let grid = prediction_grid(cfg).stage("predict")?;
    let mut fsp = linearized_output(cfg, "fsp", &fit.posterior, &trained.likelihood, &data, &grid).stage("predict")?;
    let context_excess = context_variance_excess(&fit.posterior, &prior).stage("predict")?;
    fsp.extra = vec![
        ("lanczos_rank".into(), fit.lanczos_rank as f64),
        ("posterior_rank".into(), fit.posterior.rank() as f64),
        ("truncation".into(), fit.posterior.truncation as f64),
        ("context_variance_excess".into(), context_excess),
        ("train_steps".into(), trained.steps as f64),
    ];
    if cfg.input_dim() == 1 {
        fsp.extra.push(("sample_roughness".into(), roughness(&fsp.samples)));
    }
    let mut methods = vec![fsp];

    if cfg.baselines.weight_space {
        let ws_prior = IsotropicPrior::new(cfg.baselines.prior_std).stage("baseline")?;
        let ws = train_map_ws(
            &spec,
            spec.init_params(seed_for(cfg, 4)),
            &ws_prior,
            likelihood_for(cfg).stage("baseline")?,
            &data.train,
            data.validation.as_ref(),
            &cfg.train,
        )
        .stage("baseline")?;
        let post = laplace_ws(&spec, &ws.params, &ws_prior, &data.train, &ws.likelihood).stage("baseline")?;
        methods.push(linearized_output(cfg, "laplace_ws", &post, &ws.likelihood, &data, &grid).stage("baseline")?);
        if cfg.input_dim() == 1 {
            let r = roughness(&methods.last().expect("pushed").samples);
            methods.last_mut().expect("pushed").extra.push(("sample_roughness".into(), r));
        }
    }
    if cfg.baselines.gp && !cfg.is_classification() {
        methods.push(gp_output(cfg, &prior, &data, &grid).stage("baseline")?);
    }

    let prefix = |name: &str| if sub.is_empty() { PathBuf::from(name) } else { Path::new(sub).join(name) };
    let write = |art: &mut Artifacts| -> Result<()> {
        if !sub.is_empty() {
            art.subdir(sub)?;
        }
        let mut log = Vec::new();
        trained.log.write_csv(&mut log)?;
        art.write(prefix("train_log.csv"), log)?;
        art.write(prefix("predictions.csv"), predictions_csv(&grid, &methods))?;
        art.write(prefix("samples.csv"), samples_csv(&grid, &methods))?;
        let rows = metric_entries(&methods);
        art.write(prefix("metrics.json"), metrics_json(cfg.base_task().name(), &rows))?;
        art.write(prefix("metrics.csv"), metrics_csv(&rows))?;
        art.write(
            prefix("plot.svg"),
            render(&panels(&grid, &data.train, &methods, cfg.is_classification())),
        )?;
        Ok(())
    };
    write(art).stage("write")?;
    Ok(RunSummary {
        fit,
        prior,
        methods,
        grid,
        data,
        context_excess,
    })
}

/// Closed-form and linearized predictions of the linear-Gaussian oracle task.
#[derive(Debug, Clone)]
pub struct OracleComparison {
    pub queries: Points,
    pub blr_mean: Vec<f64>,
    pub blr_var: Vec<f64>,
    pub fsp_mean: Vec<f64>,
    pub fsp_var: Vec<f64>,
    pub ws_mean: Vec<f64>,
    pub ws_var: Vec<f64>,
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12))
        .fold(0.0, f64::max)
}

impl OracleComparison {
    pub fn fsp_rel_error(&self) -> (f64, f64) {
        (max_rel(&self.fsp_mean, &self.blr_mean), max_rel(&self.fsp_var, &self.blr_var))
    }

    pub fn ws_rel_error(&self) -> (f64, f64) {
        (max_rel(&self.ws_mean, &self.blr_mean), max_rel(&self.ws_var, &self.blr_var))
    }

    pub fn max_abs_var_error(&self) -> f64 {
        self.fsp_var
            .iter()
            .zip(&self.blr_var)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Linear model `y = w.x + b` with `w, b ~ N(0, s_p^2)`: the function-space prior is the
/// linear kernel `s_p^2 (x.x' + 1)`, the conjugate posterior mean is injected as the MAP.
pub fn oracle_blr(cfg: &ExperimentConfig) -> Result<OracleComparison> {
    let data = generate_data(cfg).stage("data")?;
    let d = cfg.data.features;
    let sp2 = cfg.baselines.prior_std.powi(2);
    let s2 = cfg.likelihood.noise_std.powi(2);
    let lik = Likelihood::gaussian(cfg.likelihood.noise_std).stage("prior")?;
    let spec = MlpSpec::new(vec![d, 1], Activation::Identity).stage("model")?;
    let n = data.train.len();
    let phi = |xs: &Points| DMatrix::from_fn(xs.len(), d + 1, |i, j| if j < d { xs.row(i)[j] } else { 1.0 });
    let y = match data.train.targets() {
        Targets::Real(y) => DVector::from_column_slice(y.as_slice()),
        Targets::Class { .. } => unreachable!("oracle data is real-valued"),
    };
    let f = phi(data.train.inputs());
    let precision = f.transpose() * &f / s2 + DMatrix::identity(d + 1, d + 1) / sp2;
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numerical("conjugate precision is not positive definite"))
        .stage("oracle")?;
    let w = chol.solve(&(f.transpose() * y / s2));
    let cov = chol.inverse();
    let map = ParamVector::from_vec(w.iter().copied().collect());
    debug_assert_eq!(n, f.nrows());

    let prior = GpPrior::new(
        PriorMean::zero(1),
        MultiOutputKernel::replicated(Kernel::linear(sp2, sp2).stage("prior")?, 1).stage("prior")?,
        Default::default(),
    )
    .stage("prior")?;
    let context = covariance_context(cfg).stage("context")?;
    let fit = fit_laplace(&spec, &map, &prior, &data.train, &lik, &context, &cfg.lanczos).stage("laplace")?;
    let ws = laplace_ws(
        &spec,
        &map,
        &IsotropicPrior::new(cfg.baselines.prior_std).stage("baseline")?,
        &data.train,
        &lik,
    )
    .stage("baseline")?;

    let queries = ContextSampler::Halton {
        lo: vec![-2.0; d],
        hi: vec![2.0; d],
        skip: 17,
    }
    .sample_seeded(10, 0)
    .stage("predict")?;
    let q = phi(&queries);
    let blr_mean: Vec<f64> = (&q * &w).iter().copied().collect();
    let blr_var: Vec<f64> = (0..q.nrows())
        .map(|i| (q.row(i) * &cov * q.row(i).transpose())[(0, 0)])
        .collect();
    let fsp = lin_predict(&fit.posterior, &queries).stage("predict")?;
    let wsp = lin_predict(&ws, &queries).stage("predict")?;
    Ok(OracleComparison {
        blr_mean,
        blr_var,
        fsp_mean: fsp.means.column(0).iter().copied().collect(),
        fsp_var: (0..queries.len()).map(|i| fsp.variance(i, 0)).collect(),
        ws_mean: wsp.means.column(0).iter().copied().collect(),
        ws_var: (0..queries.len()).map(|i| wsp.variance(i, 0)).collect(),
        queries,
    })
}

fn oracle_artifacts(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let c = oracle_blr(cfg)?;
    let d = c.queries.dim();
    let mut s = String::new();
    for j in 0..d {
        let _ = write!(s, "x{j},");
    }
    s.push_str("blr_mean,blr_var,fsp_mean,fsp_var,ws_mean,ws_var\n");
    for i in 0..c.queries.len() {
        for &x in c.queries.row(i) {
            let _ = write!(s, "{},", fmt(x));
        }
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            fmt(c.blr_mean[i]),
            fmt(c.blr_var[i]),
            fmt(c.fsp_mean[i]),
            fmt(c.fsp_var[i]),
            fmt(c.ws_mean[i]),
            fmt(c.ws_var[i])
        );
    }
    let (fm, fv) = c.fsp_rel_error();
    let (wm, wv) = c.ws_rel_error();
    let rows = vec![
        ("fsp".to_string(), "max_rel_mean_error".to_string(), fm),
        ("fsp".to_string(), "max_rel_var_error".to_string(), fv),
        ("fsp".to_string(), "max_abs_var_error".to_string(), c.max_abs_var_error()),
        ("laplace_ws".to_string(), "max_rel_mean_error".to_string(), wm),
        ("laplace_ws".to_string(), "max_rel_var_error".to_string(), wv),
    ];
    let write = |art: &mut Artifacts| -> Result<()> {
        art.write("oracle.csv", &s)?;
        art.write("metrics.json", metrics_json(cfg.task.name(), &rows))?;
        art.write("metrics.csv", metrics_csv(&rows))?;
        Ok(())
    };
    write(art).stage("write")
}

fn prior_ablation(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let kernels = cfg.ablation_kernels().stage("prior")?;
    let mut s = String::from("index,kernel,fsp_roughness,fsp_context_variance_excess,fsp_expected_log_likelihood\n");
    for (i, kernel) in kernels.into_iter().enumerate() {
        let name = kernel.to_string();
        let run = predictive_run(cfg, kernel, art, &format!("prior_{i}"))?;
        let fsp = run.method("fsp").expect("fsp always runs");
        let _ = writeln!(
            s,
            "{i},\"{name}\",{},{},{}",
            fmt(roughness(&fsp.samples)),
            fmt(run.context_excess),
            fmt(fsp.metrics.expected_log_likelihood)
        );
    }
    art.write("ablation.csv", s).map(|_| ()).stage("write")
}

fn context_ablation(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let kernel = cfg.kernel().stage("prior")?;
    let mut s = String::from("m,fsp_context_variance_excess,fsp_min_std,fsp_max_std,fsp_expected_log_likelihood\n");
    for &m in &cfg.ablation.context_sizes {
        let mut c = cfg.clone();
        c.task = cfg.ablation.base_task;
        c.train.context_points = m;
        let (lo, hi) = match c.train_sampler() {
            ContextSampler::UniformBox { lo, hi }
            | ContextSampler::Grid { lo, hi, .. }
            | ContextSampler::Halton { lo, hi, .. } => (lo, hi),
            ContextSampler::FromDataset { .. } => c.grid_box(),
        };
        c.context.train = Some(ContextSampler::UniformBox {
            lo: lo.clone(),
            hi: hi.clone(),
        });
        c.context.covariance = Some(ContextSampler::Halton { lo, hi, skip: 0 });
        c.context.covariance_points = Some(m);
        let run = predictive_run(&c, kernel.clone(), art, &format!("m_{m}"))?;
        let fsp = run.method("fsp").expect("fsp always runs");
        let _ = writeln!(
            s,
            "{m},{},{},{},{}",
            fmt(run.context_excess),
            fmt(fsp.std.min()),
            fmt(fsp.std.max()),
            fmt(fsp.metrics.expected_log_likelihood)
        );
    }
    art.write("ablation.csv", s).map(|_| ()).stage("write")
}

/// Runs a configured experiment into `out` and returns the artifact directory.
/// `source` is the configuration text copied into the directory.
pub fn run_experiment(cfg: &ExperimentConfig, source: &str, out: &Path) -> Result<PathBuf> {
    let mut art = Artifacts::create(out).stage("write")?;
    let result = (|| -> Result<()> {
        art.write("config.toml", source).stage("write")?;
        match cfg.task {
            TaskKind::SineRegression | TaskKind::TwoMoons => {
                predictive_run(cfg, cfg.kernel().stage("prior")?, &mut art, "").map(|_| ())
            }
            TaskKind::PriorAblation => prior_ablation(cfg, &mut art),
            TaskKind::ContextAblation => context_ablation(cfg, &mut art),
            TaskKind::OracleBlr => oracle_artifacts(cfg, &mut art),
        }
    })();
    match result {
        Ok(()) => Ok(art.dir().to_path_buf()),
        Err(e) => {
            art.discard();
            Err(e)
        }
    }
}

/// Runs a sine-regression or two-moons experiment in memory and returns its summary.
/// Artifacts go to `out`.
pub fn run_predictive(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let mut art = Artifacts::create(out).stage("write")?;
    match predictive_run(cfg, cfg.kernel().stage("prior")?, &mut art, "") {
        Ok(r) => Ok(r),
        Err(e) => {
            art.discard();
            Err(e)
        }
    }
}

pub const CHECKPOINT_FILE: &str = "map.ckpt";
pub const POSTERIOR_FILE: &str = "posterior.bin";

fn model_parts(cfg: &ExperimentConfig) -> Result<(TaskData, GpPrior, MlpSpec)> {
    let data = generate_data(cfg).stage("data")?;
    let prior = prior_for(cfg, cfg.kernel().stage("prior")?, &data.train).stage("prior")?;
    let spec = cfg.mlp().stage("model")?;
    Ok((data, prior, spec))
}

fn single_task(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.task {
        TaskKind::SineRegression | TaskKind::TwoMoons => Ok(()),
        t => Err(Error::config(format!(
            "this command runs sine-regression or two-moons, not {}",
            t.name()
        ))),
    }
}

/// Function-space MAP training; writes `map.ckpt` and `train_log.csv`.
pub fn run_train(cfg: &ExperimentConfig, source: &str, out: &Path) -> Result<TrainOutcome> {
    single_task(cfg)?;
    let (data, prior, spec) = model_parts(cfg)?;
    let outcome = train_fsp(cfg, &spec, &prior, &data).stage("train")?;
    let mut art = Artifacts::create(out).stage("write")?;
    let write = |art: &mut Artifacts| -> Result<()> {
        let mut ckpt = Vec::new();
        write_checkpoint(&mut ckpt, &spec, &outcome.params)?;
        art.write(CHECKPOINT_FILE, ckpt)?;
        let mut log = Vec::new();
        outcome.log.write_csv(&mut log)?;
        art.write("train_log.csv", log)?;
        art.write("config.toml", source)?;
        Ok(())
    };
    if let Err(e) = write(&mut art) {
        art.discard();
        return Err(e.in_stage("write"));
    }
    Ok(outcome)
}

fn load_map(out: &Path, spec: &MlpSpec) -> Result<ParamVector> {
    let file = fs::File::open(out.join(CHECKPOINT_FILE))?;
    let (ckpt_spec, params) = read_checkpoint(std::io::BufReader::new(file))?;
    if &ckpt_spec != spec {
        return Err(Error::config("checkpoint architecture differs from the configured model"));
    }
    Ok(params)
}

/// Fits the posterior around `map.ckpt` in `out`; writes `posterior.bin`.
pub fn run_laplace(cfg: &ExperimentConfig, out: &Path) -> Result<LaplaceFit> {
    single_task(cfg)?;
    let (data, prior, spec) = model_parts(cfg)?;
    let map = load_map(out, &spec).stage("load")?;
    let context = covariance_context(cfg).stage("context")?;
    let lik = likelihood_for(cfg).stage("laplace")?;
    let fit = fit_laplace(&spec, &map, &prior, &data.train, &lik, &context, &cfg.lanczos).stage("laplace")?;
    let mut buf = Vec::new();
    write_posterior(&mut buf, &fit.posterior).stage("write")?;
    let mut art = Artifacts::create(out).stage("write")?;
    art.write(POSTERIOR_FILE, buf).stage("write")?;
    Ok(fit)
}

/// Predictions and metrics of the stored posterior in `out`.
pub fn run_predict(cfg: &ExperimentConfig, out: &Path) -> Result<MetricReport> {
    single_task(cfg)?;
    let data = generate_data(cfg).stage("data")?;
    let file = fs::File::open(out.join(POSTERIOR_FILE)).map_err(Error::from).stage("load")?;
    let post = read_posterior(std::io::BufReader::new(file)).stage("load")?;
    let lik = likelihood_for(cfg).stage("predict")?;
    let grid = prediction_grid(cfg).stage("predict")?;
    let fsp = linearized_output(cfg, "fsp", &post, &lik, &data, &grid).stage("predict")?;
    let methods = [fsp];
    let rows = metric_entries(&methods);
    let mut art = Artifacts::create(out).stage("write")?;
    let write = |art: &mut Artifacts| -> Result<()> {
        art.write("predictions.csv", predictions_csv(&grid, &methods))?;
        art.write("samples.csv", samples_csv(&grid, &methods))?;
        art.write("metrics.json", metrics_json(cfg.task.name(), &rows))?;
        art.write("metrics.csv", metrics_csv(&rows))?;
        art.write(
            "plot.svg",
            render(&panels(&grid, &data.train, &methods, cfg.is_classification())),
        )?;
        Ok(())
    };
    write(&mut art).stage("write")?;
    let [fsp] = methods;
    Ok(fsp.metrics)
}

/// Dense null-space check around `map.ckpt` in `out` (trained on the fly when absent);
/// writes `nullspace.json`.
pub fn run_diagnose(cfg: &ExperimentConfig, out: &Path) -> Result<NullSpaceReport> {
    single_task(cfg)?;
    let (data, prior, spec) = model_parts(cfg)?;
    let map = if out.join(CHECKPOINT_FILE).exists() {
        load_map(out, &spec).stage("load")?
    } else {
        train_fsp(cfg, &spec, &prior, &data).stage("train")?.params
    };
    let context = covariance_context(cfg).stage("context")?;
    let lik = likelihood_for(cfg).stage("diagnose")?;
    let report =
        null_space_diagnostic(&spec, &map, &data.train, &prior, &context, &lik, &cfg.lanczos).stage("diagnose")?;
    let json = serde_json::json!({
        "task": cfg.task.name(),
        "ratio": report.ratio,
        "projected_rank": report.projected_rank,
        "num_params": report.num_params,
    });
    let mut art = Artifacts::create(out).stage("write")?;
    art.write("nullspace.json", format!("{json:#}\n")).stage("write")?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "task = \"{task}\"\n[data]\nn_train = 20\nn_test = 20\n[model]\nhidden = [8]\n[train]\nepochs = 5\n\
             context_points = 10\n[eval]\ngrid_points = 12\nmetric_samples = 4\nplot_samples = 4\ntrace_samples = 2\n\
             [context]\ncovariance_points = 20\n"
        ))
        .unwrap()
    }

    #[test]
    fn sine_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = tiny("sine-regression");
        run_experiment(&cfg, "task = \"sine-regression\"\n", &out).unwrap();
        for f in ["config.toml", "train_log.csv", "predictions.csv", "samples.csv", "metrics.json", "metrics.csv", "plot.svg"] {
            assert!(out.join(f).exists(), "{f}");
        }
        let pred = fs::read_to_string(out.join("predictions.csv")).unwrap();
        assert!(pred.starts_with("method,x0,output,mean,std\n"));
        // three methods on a 12-point grid
        assert_eq!(pred.lines().count(), 1 + 3 * 12);
        let samples = fs::read_to_string(out.join("samples.csv")).unwrap();
        assert_eq!(samples.lines().count(), 1 + 2 * 2 * 12);
        let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert!(metrics["fsp.expected_log_likelihood"].is_number());
        assert!(metrics["gp.mse"].is_number());
        for line in pred.lines().skip(1) {
            let std: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
            assert!(std >= 0.0);
        }
    }

    #[test]
    fn two_moons_run_predicts_probabilities() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("two-moons");
        cfg.eval.grid_points = Some(5);
        let r = run_predictive(&cfg, dir.path()).unwrap();
        let fsp = r.method("fsp").unwrap();
        assert_eq!(fsp.mean.shape(), (25, 2));
        for i in 0..25 {
            assert!((fsp.mean.row(i).sum() - 1.0).abs() < 1e-9);
        }
        assert!(fsp.metrics.accuracy.is_some() && fsp.metrics.ece.is_some());
        assert!(r.method("gp").is_none());
        assert!(r.context_excess <= 1e-8);
    }

    #[test]
    fn failures_name_the_stage_and_clean_up() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fresh").join("run");
        let mut cfg = tiny("sine-regression");
        cfg.train.learning_rate = 1e300;
        let err = run_experiment(&cfg, "", &out).unwrap_err();
        assert!(err.to_string().starts_with("train:"), "{err}");
        assert!(err.is_numerical());
        assert!(!dir.path().join("fresh").exists());
    }

    #[test]
    fn oracle_matches_the_conjugate_posterior() {
        let mut cfg = ExperimentConfig::parse("task = \"oracle-blr\"").unwrap();
        cfg.data.n_train = 15;
        let c = oracle_blr(&cfg).unwrap();
        let (m, v) = c.fsp_rel_error();
        assert!(m <= 1e-4 && v <= 1e-4, "{m} {v}");
        let (m, v) = c.ws_rel_error();
        assert!(m <= 1e-8 && v <= 1e-8, "{m} {v}");
    }

    #[test]
    fn roughness_of_lines_is_zero() {
        let line = DMatrix::from_fn(10, 1, |i, _| 2.0 * i as f64 + 1.0);
        assert!(roughness(&[line]).abs() < 1e-20);
        let zigzag = DMatrix::from_fn(4, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(roughness(&[zigzag]), 16.0);
    }

    #[test]
    fn subcommands_chain_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("sine-regression");
        run_train(&cfg, "", dir.path()).unwrap();
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
        let fit = run_laplace(&cfg, dir.path()).unwrap();
        assert!(dir.path().join(POSTERIOR_FILE).exists());
        let report = run_predict(&cfg, dir.path()).unwrap();
        assert!(report.expected_log_likelihood.is_finite());
        assert!(fit.posterior.rank() > 0);
        let ns = run_diagnose(&cfg, dir.path()).unwrap();
        assert!(ns.ratio >= 0.0 && ns.ratio <= 1.0);
        assert!(run_train(&tiny("oracle-blr"), "", dir.path()).unwrap_err().is_config());
    }
}
