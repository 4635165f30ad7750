//! Experiment configuration. One JSON document describes a run completely;
//! unknown keys are rejected.

use std::f64::consts::PI;
use std::path::Path;

use kan_ntk::model::predict;
use kan_ntk::optim::TrainConfig;
use kan_ntk::pinn::ProblemDescriptor;
use kan_ntk::rng::{Stream, DATA_STREAM};
use kan_ntk::{init_params, BasisSpec, Dataset, KanShape, TransformSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Regression,
    Pinn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFamily {
    Chebyshev,
    Monomial,
    GaussianRbf,
    /// Cubic, uniform knots on `[-1, 1]`.
    Bspline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub n: usize,
    pub m: usize,
    pub n_d: usize,
    pub basis: BasisFamily,
    pub transform: TransformSpec,
}

impl ShapeConfig {
    pub fn basis_spec(&self, n_d: usize) -> Result<BasisSpec, CliError> {
        Ok(match self.basis {
            BasisFamily::Chebyshev => BasisSpec::chebyshev(n_d),
            BasisFamily::Monomial => BasisSpec::monomial(n_d),
            BasisFamily::GaussianRbf => BasisSpec::gaussian_rbf_uniform(n_d, -1.0, 1.0),
            #[cfg(feature = "bspline")]
            BasisFamily::Bspline => BasisSpec::bspline_uniform(n_d, 4, -1.0, 1.0),
            #[cfg(not(feature = "bspline"))]
            BasisFamily::Bspline => return Err(CliError::Config("built without B-spline support".into())),
        })
    }

    pub fn build(&self) -> Result<KanShape, CliError> {
        self.build_with(self.m, self.n_d)
    }

    pub fn build_with(&self, m: usize, n_d: usize) -> Result<KanShape, CliError> {
        Ok(KanShape::uniform(self.n, m, self.basis_spec(n_d)?, self.transform)?)
    }
}

/// Regression targets as functions of `x` in `[-1, 1]^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFunction {
    /// `0.5 sin(pi x_1) + 0.5 sum_{p>=2} x_p^2`.
    Smooth,
    /// `prod_p cos(x_p)`.
    Product,
    Zero,
    /// The network itself at the initialization being studied.
    Network,
}

impl TargetFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TargetFunction::Smooth => 0.5 * (PI * x[0]).sin() + 0.5 * x[1..].iter().map(|v| v * v).sum::<f64>(),
            TargetFunction::Product => x.iter().map(|v| v.cos()).product(),
            TargetFunction::Zero | TargetFunction::Network => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Regression sample count `N`.
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default)]
    pub target: Option<TargetFunction>,
    #[serde(default)]
    pub seed: u64,
    /// Index of a row to duplicate onto the last row.
    #[serde(default)]
    pub duplicate_row: Option<usize>,
    /// PDE problem for the `pinn` task.
    #[serde(default)]
    pub problem: Option<ProblemDescriptor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Step size; the mode-specific default is filled in when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    pub steps: usize,
    /// Per-group mini-batch sizes; absent means full batch.
    #[serde(default)]
    pub batch: Option<Vec<usize>>,
    #[serde(default)]
    pub batch_seed: u64,
    #[serde(default)]
    pub loss_tolerance: f64,
    #[serde(default)]
    pub gram_every: usize,
    #[serde(default = "ten")]
    pub chi_every: usize,
    #[serde(default = "yes")]
    pub with_replacement: bool,
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl TrainSection {
    pub fn to_train_config(&self, eta: f64) -> TrainConfig {
        TrainConfig {
            eta,
            steps: self.steps,
            batch: self.batch.clone(),
            seed: self.batch_seed,
            loss_tolerance: self.loss_tolerance,
            gram_every: self.gram_every,
            chi_every: self.chi_every,
            with_replacement: self.with_replacement,
        }
    }

    pub fn is_stochastic(&self, group_sizes: &[usize]) -> bool {
        self.batch.as_ref().is_some_and(|b| b.iter().zip(group_sizes).any(|(x, y)| x != y))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default)]
    pub widths: Vec<usize>,
    #[serde(default)]
    pub n_d_sweep: Vec<usize>,
    /// Initialization seeds per sweep point.
    #[serde(default = "ten")]
    pub seeds: usize,
    /// Seeds averaged into the expected Gram estimate.
    #[serde(default = "two_hundred")]
    pub ginf_seeds: usize,
    /// Independent SGD runs for the expectation study.
    #[serde(default = "twenty")]
    pub runs: usize,
    /// Oracle-suite instance count.
    #[serde(default = "hundred")]
    pub instances: usize,
    #[serde(default)]
    pub negative_control: bool,
    #[serde(default)]
    pub zero_outer: bool,
    /// Probability levels, reported only.
    #[serde(default = "five_percent")]
    pub delta: f64,
    #[serde(default = "five_percent")]
    pub delta_tilde: f64,
    /// Failure probability inside the stability radii.
    #[serde(default = "one_percent")]
    pub radii_delta: f64,
    #[serde(default = "slack")]
    pub rate_slack: f64,
    #[serde(default = "five_percent")]
    pub max_grid_error: f64,
    #[serde(default = "thirty_two")]
    pub grid: usize,
}

fn two_hundred() -> usize {
    200
}
fn twenty() -> usize {
    20
}
fn hundred() -> usize {
    100
}
fn thirty_two() -> usize {
    32
}
fn five_percent() -> f64 {
    0.05
}
fn one_percent() -> f64 {
    0.01
}
fn slack() -> f64 {
    0.02
}

impl Default for StudyConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub shape: ShapeConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub init_seed: u64,
    pub train: TrainSection,
    #[serde(default)]
    pub study: StudyConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.shape.build()?;
        if let Some(eta) = self.train.eta {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(CliError::Config(format!("eta must be finite and nonnegative, got {eta}")));
            }
        }
        match self.task {
            Task::Regression => {
                let n = self.data.n_samples.ok_or_else(|| CliError::Config("data.n_samples is required".into()))?;
                if n == 0 {
                    return Err(CliError::Config("data.n_samples must be positive".into()));
                }
                if self.data.target.is_none() {
                    return Err(CliError::Config("data.target is required".into()));
                }
                if let Some(r) = self.data.duplicate_row {
                    if r + 1 >= n {
                        return Err(CliError::Config(format!("duplicate_row {r} must precede the last row")));
                    }
                }
                self.train.to_train_config(1.0).validate(&[n])?;
            }
            Task::Pinn => {
                let p =
                    self.data.problem.as_ref().ok_or_else(|| CliError::Config("data.problem is required".into()))?;
                if self.shape.n != 2 {
                    return Err(CliError::Config("manufactured problems are two-dimensional".into()));
                }
                if let Some(b) = &self.train.batch {
                    if b.len() != 2 {
                        return Err(CliError::Config("pinn batch needs [b1, b2]".into()));
                    }
                    kan_ntk::pinn::PinnBatchConfig::new(b[0], b[1], p.n1, p.n2)?;
                }
                self.train.to_train_config(1.0).validate(&[p.n1, p.n2])?;
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> Result<KanShape, CliError> {
        self.shape.build()
    }

    /// Regression dataset with rows uniform in `[-1, 1]^n`.
    pub fn dataset(&self) -> Result<Dataset, CliError> {
        let n_samples = self.data.n_samples.ok_or_else(|| CliError::Config("data.n_samples is required".into()))?;
        let target = self.data.target.unwrap_or(TargetFunction::Smooth);
        let n = self.shape.n;
        let mut rng = Stream::new(self.data.seed ^ DATA_STREAM);
        let mut x: Vec<f64> = (0..n * n_samples).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        if let Some(r) = self.data.duplicate_row {
            let row = x[r * n..(r + 1) * n].to_vec();
            x[(n_samples - 1) * n..].copy_from_slice(&row);
        }
        let y = x.chunks(n).map(|row| target.eval(row)).collect();
        Ok(Dataset::new(n, x, y)?)
    }

    /// Dataset for one initialization; `Network` targets are read off that net.
    pub fn dataset_for(&self, shape: &KanShape, seed: u64) -> Result<Dataset, CliError> {
        let data = self.dataset()?;
        if self.data.target == Some(TargetFunction::Network) {
            let params = init_params(shape, seed)?;
            let y = (0..data.len()).map(|i| predict(&params, data.row(i))).collect::<Result<Vec<_>, _>>()?;
            return Ok(data.with_targets(y)?);
        }
        Ok(data)
    }
}
