//! Experiment configuration, read from sectioned TOML.
//!
//! ```toml
//! task = "sine-regression"   # two-moons | prior-ablation | context-ablation | oracle-blr
//! seed = 0
//! out_dir = "runs/sine"
//!
//! [model]
//! hidden = [50, 50]
//!
//! [prior]
//! kernel = "rbf(s2=1.0, l=0.3)"
//! mean = 0.0
//!
//! [likelihood]
//! noise_std = 0.1
//!
//! [train]            # TrainConfig
//! epochs = 2000
//!
//! [lanczos]          # LanczosConfig
//! max_rank = 500
//!
//! [context.train]    # ContextSampler, tagged by `kind`
//! kind = "uniform_box"
//! lo = [-4.0]
//! hi = [4.0]
//!
//! [context.covariance]
//! kind = "grid"
//! lo = [-4.0]
//! hi = [4.0]
//! per_dim = 100
//! ```
//!
//! Every section is optional and unknown keys are rejected. Kernel expressions use the
//! grammar of [`crate::kernels::parse_kernel`]; errors in them are reported at the line and
//! column of the offending character in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::baselines::IsotropicPrior;
use crate::context::ContextSampler;
use crate::error::{Error, Result};
use crate::gp::{GpPrior, HyperGrid, PriorMean};
use crate::kernels::{parse_kernel, JitterPolicy, Kernel, MultiOutputKernel};
use crate::laplace::LanczosConfig;
use crate::nn::{Activation, MlpSpec};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SineRegression,
    TwoMoons,
    PriorAblation,
    ContextAblation,
    OracleBlr,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SineRegression => "sine-regression",
            TaskKind::TwoMoons => "two-moons",
            TaskKind::PriorAblation => "prior-ablation",
            TaskKind::ContextAblation => "context-ablation",
            TaskKind::OracleBlr => "oracle-blr",
        }
    }

    /// Input dimension of the data the task generates (`oracle-blr` uses `data.features`).
    fn input_dim(self, data: &DataConfig) -> usize {
        match self {
            TaskKind::TwoMoons => 2,
            TaskKind::OracleBlr => data.features,
            _ => 1,
        }
    }

    fn base(self, ablation: &AblationConfig) -> TaskKind {
        match self {
            TaskKind::PriorAblation => TaskKind::SineRegression,
            TaskKind::ContextAblation => ablation.base_task,
            t => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Observation noise of the generator (sine) or perturbation scale (two-moons).
    pub noise: f64,
    /// Feature count of the `oracle-blr` task.
    pub features: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 100,
            n_validation: 0,
            n_test: 200,
            noise: 0.1,
            features: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![50, 50],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub kernel: Spanned<String>,
    pub mean: f64,
    /// Pick variance and lengthscale by maximizing the GP log marginal likelihood on the
    /// training data (regression only).
    pub select_hyperparameters: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kernel: Spanned::new(0..0, "rbf(s2=1.0, l=0.3)".to_string()),
            mean: 0.0,
            select_hyperparameters: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodConfig {
    /// Gaussian noise level for regression tasks; ignored for classification.
    pub noise_std: f64,
}

impl Default for LikelihoodConfig {
    fn default() -> Self {
        LikelihoodConfig { noise_std: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    /// Sampler for the RKHS estimator during training; per task default when absent.
    pub train: Option<ContextSampler>,
    /// Fixed context set for the posterior covariance; per task default when absent.
    pub covariance: Option<ContextSampler>,
    /// Points drawn from a non-grid covariance sampler.
    pub covariance_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Isotropic weight prior with a full-GGN Laplace posterior.
    pub weight_space: bool,
    pub prior_std: f64,
    /// Exact GP regression with the same prior (regression only).
    pub gp: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            weight_space: true,
            prior_std: 1.0,
            gp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Prediction grid points per input dimension; 200 in 1-D and 40 in 2-D by default.
    pub grid_points: Option<usize>,
    /// Prediction grid box; the covariance context box by default.
    pub grid_lo: Option<Vec<f64>>,
    pub grid_hi: Option<Vec<f64>>,
    /// Monte Carlo samples for metrics.
    pub metric_samples: usize,
    /// Monte Carlo samples for plotted class probabilities.
    pub plot_samples: usize,
    /// Function samples written to samples.csv and drawn in the plot.
    pub trace_samples: usize,
    pub ood: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            grid_points: None,
            grid_lo: None,
            grid_hi: None,
            metric_samples: 10,
            plot_samples: 100,
            trace_samples: 10,
            ood: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Kernels compared by `prior-ablation`.
    pub kernels: Vec<Spanned<String>>,
    /// Context counts compared by `context-ablation`.
    pub context_sizes: Vec<usize>,
    /// Task rerun by `context-ablation`.
    pub base_task: TaskKind,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            kernels: vec![
                Spanned::new(0..0, "rbf(s2=1.0, l=0.3)".to_string()),
                Spanned::new(0..0, "matern12(s2=1.0, l=0.3)".to_string()),
            ],
            context_sizes: vec![3, 5, 25, 100],
            base_task: TaskKind::SineRegression,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub likelihood: LikelihoodConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub lanczos: LanczosConfig,
    #[serde(default)]
    pub context: ContextConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// 1-based line and column of a byte offset.
fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.chars().rev().take_while(|&c| c != '\n').count() + 1;
    (line, col)
}

fn parse_spanned_kernel(source: &str, key: &Spanned<String>, what: &str) -> Result<Kernel> {
    parse_kernel(key.get_ref()).map_err(|e| {
        let span = key.span();
        if span.is_empty() {
            Error::config(format!("{what}: {e}"))
        } else {
            // span covers the quoted string; the expression starts one byte in
            let (line, col) = line_col(source, span.start + 1 + e.column.saturating_sub(1));
            Error::config(format!("line {line}, column {col}: {what}: {}", e.message))
        }
    })
}

impl ExperimentConfig {
    /// Parses and validates a configuration; `source` is the file text.
    pub fn parse(source: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(source, span.start);
                    Error::config(format!("line {line}, column {col}: {msg}"))
                }
                None => Error::config(msg),
            }
        })?;
        config.validate(source)?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let source = std::fs::read_to_string(path)?;
        let config = Self::parse(&source).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })?;
        Ok((config, source))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Overrides the master seed and the seeds of the training and Lanczos sections.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.lanczos.seed = seed;
        self
    }

    /// Replaces the prior kernel expression.
    pub fn with_kernel(mut self, expr: &str) -> Result<Self> {
        parse_kernel(expr).map_err(|e| Error::config(format!("prior.kernel: {e}")))?;
        self.prior.kernel = Spanned::new(0..0, expr.to_string());
        Ok(self)
    }

    fn validate(&self, source: &str) -> Result<()> {
        self.kernel_from(source)?;
        if self.task == TaskKind::PriorAblation {
            if self.ablation.kernels.is_empty() {
                return Err(Error::config("prior-ablation needs at least one kernel"));
            }
            for k in &self.ablation.kernels {
                parse_spanned_kernel(source, k, "ablation.kernels")?;
            }
        }
        if self.task == TaskKind::ContextAblation {
            if self.ablation.context_sizes.contains(&0) || self.ablation.context_sizes.is_empty() {
                return Err(Error::config("context-ablation needs positive context sizes"));
            }
            if matches!(
                self.ablation.base_task,
                TaskKind::PriorAblation | TaskKind::ContextAblation | TaskKind::OracleBlr
            ) {
                return Err(Error::config("context-ablation base task must be sine-regression or two-moons"));
            }
        }
        self.train.validate()?;
        self.lanczos.validate()?;
        IsotropicPrior::new(self.baselines.prior_std)?;
        if !(self.likelihood.noise_std > 0.0 && self.likelihood.noise_std.is_finite()) {
            return Err(Error::config("likelihood.noise_std must be positive"));
        }
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return Err(Error::config("data.noise must be non-negative"));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::config("data.n_train and data.n_test must be positive"));
        }
        if self.task == TaskKind::OracleBlr && self.data.features == 0 {
            return Err(Error::config("data.features must be positive"));
        }
        if self.eval.grid_points == Some(0) || self.eval.metric_samples == 0 || self.eval.plot_samples == 0 {
            return Err(Error::config("eval sample and grid counts must be positive"));
        }
        if self.prior.select_hyperparameters && self.base_task() == TaskKind::TwoMoons {
            return Err(Error::config("hyperparameter selection is only available for regression"));
        }
        let dim = self.input_dim();
        for s in [self.train_sampler(), self.covariance_sampler()] {
            s.validate()?;
            if s.dim() != dim {
                return Err(Error::config(format!("context sampler has dimension {}, task needs {dim}", s.dim())));
            }
        }
        let (lo, hi) = self.grid_box();
        if lo.len() != dim || hi.len() != dim || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::config("eval grid box must match the input dimension with lo < hi"));
        }
        Ok(())
    }

    /// The task whose data and model a run uses.
    pub fn base_task(&self) -> TaskKind {
        self.task.base(&self.ablation)
    }

    pub fn input_dim(&self) -> usize {
        self.base_task().input_dim(&self.data)
    }

    pub fn output_dim(&self) -> usize {
        match self.base_task() {
            TaskKind::TwoMoons => 2,
            _ => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        self.base_task() == TaskKind::TwoMoons
    }

    /// Parses the prior kernel; `source` locates errors in the file.
    pub fn kernel_from(&self, source: &str) -> Result<Kernel> {
        parse_spanned_kernel(source, &self.prior.kernel, "prior.kernel")
    }

    pub fn kernel(&self) -> Result<Kernel> {
        self.kernel_from("")
    }

    pub fn ablation_kernels(&self) -> Result<Vec<Kernel>> {
        self.ablation
            .kernels
            .iter()
            .map(|k| parse_spanned_kernel("", k, "ablation.kernels"))
            .collect()
    }

    pub fn prior_for(&self, kernel: Kernel) -> Result<GpPrior> {
        let outputs = self.output_dim();
        GpPrior::new(
            PriorMean::constant(self.prior.mean, outputs),
            MultiOutputKernel::replicated(kernel, outputs)?,
            JitterPolicy::default(),
        )
    }

    pub fn mlp(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.input_dim()];
        widths.extend_from_slice(&self.model.hidden);
        widths.push(self.output_dim());
        MlpSpec::new(widths, self.model.activation)
    }

    fn default_box(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.input_dim();
        let half = match self.base_task() {
            TaskKind::TwoMoons => 3.75,
            TaskKind::OracleBlr => 2.0,
            _ => 4.0,
        };
        (vec![-half; dim], vec![half; dim])
    }

    pub fn train_sampler(&self) -> ContextSampler {
        self.context.train.clone().unwrap_or_else(|| {
            let (lo, hi) = self.default_box();
            ContextSampler::UniformBox { lo, hi }
        })
    }

    pub fn covariance_sampler(&self) -> ContextSampler {
        self.context.covariance.clone().unwrap_or_else(|| {
            let (lo, hi) = self.default_box();
            match self.base_task() {
                TaskKind::OracleBlr => ContextSampler::Halton { lo, hi, skip: 0 },
                TaskKind::TwoMoons => ContextSampler::Grid { lo, hi, per_dim: 10 },
                _ => ContextSampler::Grid { lo, hi, per_dim: 100 },
            }
        })
    }

    pub fn covariance_points(&self) -> usize {
        self.context.covariance_points.unwrap_or(100)
    }

    pub fn grid_box(&self) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.default_box();
        (
            self.eval.grid_lo.clone().unwrap_or(lo),
            self.eval.grid_hi.clone().unwrap_or(hi),
        )
    }

    pub fn grid_points(&self) -> usize {
        self.eval
            .grid_points
            .unwrap_or(if self.input_dim() == 1 { 200 } else { 40 })
    }

    pub fn hyper_grid(&self) -> HyperGrid {
        HyperGrid::default()
    }
}
