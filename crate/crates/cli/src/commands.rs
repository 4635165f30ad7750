//! One function per subcommand. Each writes its artifacts under `out` and
//! returns a typed report; `passed` is false on any check breach.

use std::collections::BTreeMap;
use std::path::Path;

use kan_ntk::gradcheck::{oracle_suite, OracleConfig, OracleReport};
use kan_ntk::ntk::{
    assemble_d_objective, distinctness_check, estimate_g_infinity, gram, gram_closed_form, gram_deviation,
    max_unit_c_drift, measure_drift, Distinctness, LazyRadii,
};
use kan_ntk::optim::{
    default_gd_eta, default_pinn_eta, default_sgd_eta, expectation_harness, fit_contraction, train,
    write_trajectory_csv, ContractionFit, TrainOutcome,
};
use kan_ntk::pinn::{grid_max_error, problem_from_descriptor};
use kan_ntk::{init_params, validate_boundedness, Dataset, KanError, KanShape, Objective};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{prepare, write_file, write_summary};
use crate::config::{ExperimentConfig, Task};
use crate::stats::{loglog_slope, median, percentile, std_error, SlopeFit};
use crate::CliError;

/// Seeds for the expected-Gram estimate start here, away from init seeds.
pub const GINF_SEED_BASE: u64 = 1 << 32;

/// Scaling-slope acceptance window.
pub const SLOPE_WINDOW: (f64, f64) = (-0.65, -0.35);

#[derive(Debug, Clone)]
pub struct Outcome<T> {
    pub passed: bool,
    pub report: T,
}

fn finish<T: Serialize>(out: &Path, checks: &BTreeMap<String, bool>, report: T) -> Result<Outcome<T>, CliError> {
    let passed = checks.values().all(|&v| v);
    write_summary(out, passed, &report)?;
    Ok(Outcome { passed, report })
}

fn require_task(cfg: &ExperimentConfig, task: Task) -> Result<(), CliError> {
    if cfg.task != task {
        return Err(CliError::Config(format!("this subcommand needs task {task:?}")));
    }
    Ok(())
}

fn data_warnings(shape: &KanShape, data: &Dataset) -> Vec<String> {
    let mut w = validate_boundedness(&shape.outer_basis, shape.transform).warnings;
    if let Distinctness::Duplicates(pairs) = distinctness_check(data) {
        w.push(format!("duplicate samples at {pairs:?}; the Gram matrix is singular"));
    }
    w
}

fn monotone(losses: &[f64]) -> bool {
    losses.windows(2).all(|w| w[1] <= w[0])
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// gradcheck

pub fn cmd_gradcheck(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<OracleReport>, CliError> {
    let shape = cfg.shape()?;
    if shape.num_params() > 5000 {
        return Err(CliError::Config(format!(
            "gradcheck needs at most 5000 parameters, shape has {}",
            shape.num_params()
        )));
    }
    prepare(out, cfg)?;
    let oracle = OracleConfig {
        instances: cfg.study.instances,
        seed: cfg.init_seed,
        max_m: cfg.shape.m,
        max_n: cfg.shape.n,
        max_n_d: cfg.shape.n_d,
        zero_outer: cfg.study.zero_outer,
        negative_control: cfg.study.negative_control,
    };
    let report = oracle_suite(&oracle)?;
    let checks = report.blocks.iter().map(|b| (b.name.clone(), b.passed)).collect();
    finish(out, &checks, report)
}

// ---------------------------------------------------------------------------
// train / pinn

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: String,
    pub eta: f64,
    pub steps_run: usize,
    pub loss_init: f64,
    pub loss_final: f64,
    pub converged: bool,
    pub monotone: bool,
    pub sigma_min_init: f64,
    pub sigma_max_init: f64,
    pub rho_hat: Option<f64>,
    pub rate_ceiling: f64,
    pub chi_checked: usize,
    pub chi_violations: usize,
    /// `max_t ||chi(t)|| / ((eta sigma_min / 4) ||s(t)||)`.
    pub chi_max_ratio: Option<f64>,
    pub stopping_time: Option<usize>,
    pub radii: LazyRadii,
    pub grid_max_error: Option<f64>,
    pub delta: f64,
    pub delta_tilde: f64,
    pub error: Option<String>,
    pub warnings: Vec<String>,
    pub checks: BTreeMap<String, bool>,
}

struct Prepared {
    shape: KanShape,
    objective: Objective,
    eta: f64,
    sigma_min: f64,
    sigma_max: f64,
    gram_csv: Vec<u8>,
    warnings: Vec<String>,
    stochastic: bool,
}

fn prepare_run(cfg: &ExperimentConfig) -> Result<Prepared, CliError> {
    let shape = cfg.shape()?;
    let params = init_params(&shape, cfg.init_seed)?;
    let (objective, g0, warnings) = match cfg.task {
        Task::Regression => {
            let data = cfg.dataset_for(&shape, cfg.init_seed)?;
            let g0 = gram_closed_form(&params, &data)?;
            let warnings = data_warnings(&shape, &data);
            (Objective::regression(&data), g0, warnings)
        }
        Task::Pinn => {
            let desc = cfg.data.problem.as_ref().ok_or_else(|| CliError::Config("data.problem is required".into()))?;
            let problem = problem_from_descriptor(desc)?;
            let objective = problem.objective()?;
            let g0 = gram(&assemble_d_objective(&params, &objective)?)?;
            let warnings = validate_boundedness(&shape.outer_basis, shape.transform).warnings;
            (objective, g0, warnings)
        }
    };
    let sizes = objective.group_sizes();
    let stochastic = cfg.train.is_stochastic(&sizes);
    let eta = match (cfg.train.eta, cfg.task) {
        (Some(eta), _) => eta,
        (None, Task::Pinn) => default_pinn_eta(shape.n_d, shape.n),
        (None, Task::Regression) if stochastic => {
            let b = cfg.train.batch.as_ref().map_or(sizes[0], |b| b[0]);
            default_sgd_eta(b, sizes[0], g0.sigma_min, shape.n_d)
        }
        (None, Task::Regression) => default_gd_eta(shape.n_d),
    };
    let gram_csv = csv_bytes(|b| g0.write_csv(b))?;
    Ok(Prepared {
        shape,
        objective,
        eta,
        sigma_min: g0.sigma_min,
        sigma_max: g0.sigma_max,
        gram_csv,
        warnings,
        stochastic,
    })
}

/// The config with defaults resolved, as echoed into `config.json`.
fn resolved(cfg: &ExperimentConfig, eta: f64) -> ExperimentConfig {
    let mut r = cfg.clone();
    r.train.eta = Some(eta);
    r
}

fn run_training(cfg: &ExperimentConfig, out: &Path, task: Task) -> Result<Outcome<TrainReport>, CliError> {
    require_task(cfg, task)?;
    let prep = prepare_run(cfg)?;
    let cfg_resolved = resolved(cfg, prep.eta);
    prepare(out, &cfg_resolved)?;
    write_file(out, "gram_init.csv", &prep.gram_csv)?;
    let params = init_params(&prep.shape, cfg.init_seed)?;
    let radii = LazyRadii::from_theory(&prep.shape, prep.sigma_min, cfg.study.radii_delta);
    let train_cfg = cfg.train.to_train_config(prep.eta);
    let rate_ceiling = if prep.stochastic {
        1.0 - prep.eta * prep.sigma_min
    } else {
        ContractionFit::gd_ceiling(prep.eta, prep.sigma_min)
    };
    let mut report = TrainReport {
        mode: if prep.stochastic { "sgd" } else { "gd" }.into(),
        eta: prep.eta,
        steps_run: 0,
        loss_init: f64::NAN,
        loss_final: f64::NAN,
        converged: false,
        monotone: false,
        sigma_min_init: prep.sigma_min,
        sigma_max_init: prep.sigma_max,
        rho_hat: None,
        rate_ceiling,
        chi_checked: 0,
        chi_violations: 0,
        chi_max_ratio: None,
        stopping_time: None,
        radii,
        grid_max_error: None,
        delta: cfg.study.delta,
        delta_tilde: cfg.study.delta_tilde,
        error: None,
        warnings: prep.warnings.clone(),
        checks: BTreeMap::new(),
    };
    let outcome: TrainOutcome = match train(&params, &prep.objective, &train_cfg, &radii) {
        Ok(o) => o,
        Err(e @ KanError::Diverged { .. }) => {
            report.error = Some(e.to_string());
            report.checks.insert("finite".into(), false);
            let checks = report.checks.clone();
            return finish(out, &checks, report);
        }
        Err(e) => return Err(e.into()),
    };
    write_file(out, "trajectory.csv", &csv_bytes(|b| write_trajectory_csv(&outcome.records, b))?)?;

    let losses = outcome.losses();
    report.steps_run = losses.len() - 1;
    report.loss_init = losses[0];
    report.loss_final = outcome.final_loss();
    report.converged = outcome.converged;
    report.monotone = monotone(&losses);
    report.stopping_time = outcome.stopping_time;
    report.rho_hat = fit_contraction(&losses).ok().map(|f| f.rho_hat);

    let chi_scale = prep.eta * prep.sigma_min / 4.0;
    let mut worst: Option<f64> = None;
    for r in outcome.records.iter().filter(|r| r.t > 0) {
        if let Some(chi) = r.chi_norm {
            let bound = chi_scale * losses[r.t - 1].sqrt();
            report.chi_checked += 1;
            if chi > bound {
                report.chi_violations += 1;
            }
            let ratio = if bound > 0.0 {
                chi / bound
            } else if chi == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = Some(worst.map_or(ratio, |w: f64| w.max(ratio)));
        }
    }
    report.chi_max_ratio = worst;

    if task == Task::Pinn {
        let desc = cfg.data.problem.as_ref().expect("validated");
        let problem = problem_from_descriptor(desc)?;
        if let Some(exact) = &problem.exact {
            let err = grid_max_error(&outcome.params, exact, cfg.study.grid)?;
            report.grid_max_error = Some(err);
            report.checks.insert("grid_error".into(), err <= cfg.study.max_grid_error);
        }
    }

    if !prep.stochastic {
        report.checks.insert("monotone".into(), report.monotone);
        if report.chi_checked > 0 {
            report.checks.insert("chi_bound".into(), report.chi_violations == 0);
        }
    }
    if let Some(rho) = report.rho_hat {
        if task == Task::Regression {
            report.checks.insert("rate".into(), rho <= rate_ceiling + cfg.study.rate_slack);
        }
    }
    if cfg.train.loss_tolerance > 0.0 {
        report.checks.insert("converged".into(), report.converged);
    }
    let checks = report.checks.clone();
    finish(out, &checks, report)
}

/// GD/SGD on the regression loss.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<TrainReport>, CliError> {
    run_training(cfg, out, Task::Regression)
}

/// GD/SGD on a manufactured physics-informed problem.
pub fn cmd_pinn(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<TrainReport>, CliError> {
    run_training(cfg, out, Task::Pinn)
}

// ---------------------------------------------------------------------------
// gram-scaling

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramScalingRow {
    pub m: usize,
    pub mean_deviation: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramScalingReport {
    pub rows: Vec<GramScalingRow>,
    pub fit: Option<SlopeFit>,
    pub ginf_width: usize,
    pub ginf_seeds: usize,
    pub ginf_sigma_min: f64,
    /// Entries of the two-width expected-Gram comparison within 3 combined standard errors.
    pub cross_width_fraction_within_3se: f64,
    pub cross_width_max_z: f64,
    pub warnings: Vec<String>,
    pub checks: BTreeMap<String, bool>,
}

fn check_sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.study.widths.len() < 3 {
        return Err(CliError::Config("a width sweep needs at least 3 widths".into()));
    }
    Ok(())
}

pub fn cmd_gram_scaling(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<GramScalingReport>, CliError> {
    require_task(cfg, Task::Regression)?;
    check_sweep(cfg)?;
    if cfg.study.seeds < 10 {
        return Err(CliError::Config("gram-scaling needs at least 10 seeds per width".into()));
    }
    prepare(out, cfg)?;
    let base = cfg.shape()?;
    let data = cfg.dataset()?;
    let widths = &cfg.study.widths;
    let widest = *widths.iter().max().expect("nonempty");
    let narrowest = *widths.iter().min().expect("nonempty");
    let ginf = estimate_g_infinity(&base.with_width(widest), &data, cfg.study.ginf_seeds, GINF_SEED_BASE)?;

    let jobs: Vec<(usize, u64)> =
        widths.iter().flat_map(|&m| (0..cfg.study.seeds as u64).map(move |s| (m, s))).collect();
    let devs = jobs
        .par_iter()
        .map(|&(m, s)| {
            let p = init_params(&base.with_width(m), cfg.init_seed + s)?;
            gram_deviation(&gram_closed_form(&p, &data)?, &ginf.mean)
        })
        .collect::<Result<Vec<f64>, KanError>>()?;
    let rows: Vec<GramScalingRow> = widths
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let d = &devs[i * cfg.study.seeds..(i + 1) * cfg.study.seeds];
            GramScalingRow { m, mean_deviation: crate::stats::mean(d), std_error: std_error(d) }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_deviation).collect();
    let fit = loglog_slope(&xs, &ys);

    let other = estimate_g_infinity(&base.with_width(narrowest), &data, cfg.study.ginf_seeds, GINF_SEED_BASE << 1)?;
    let z: Vec<f64> = (0..ginf.mean.matrix.len())
        .map(|i| {
            let se = (ginf.std_error[i].powi(2) + other.std_error[i].powi(2)).sqrt();
            let diff = (ginf.mean.matrix[i] - other.mean.matrix[i]).abs();
            if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let within = z.iter().filter(|&&v| v <= 3.0).count() as f64 / z.len() as f64;

    let mut csv = String::from("# schema=1\nm,mean_deviation,std_error\n");
    for r in &rows {
        csv.push_str(&format!("{},{:e},{:e}\n", r.m, r.mean_deviation, r.std_error));
    }
    write_file(out, "gram_scaling.csv", csv.as_bytes())?;
    write_file(out, "gram_infinity.csv", &csv_bytes(|b| ginf.mean.write_csv(b))?)?;

    let mut checks = BTreeMap::new();
    checks.insert("slope".into(), fit.is_some_and(|f| in_window(f.slope)));
    let report = GramScalingReport {
        rows,
        fit,
        ginf_width: widest,
        ginf_seeds: cfg.study.ginf_seeds,
        ginf_sigma_min: ginf.mean.sigma_min,
        cross_width_fraction_within_3se: within,
        cross_width_max_z: z.iter().copied().fold(0.0, f64::max),
        warnings: data_warnings(&base, &data),
        checks: checks.clone(),
    };
    finish(out, &checks, report)
}

fn in_window(slope: f64) -> bool {
    (SLOPE_WINDOW.0..=SLOPE_WINDOW.1).contains(&slope)
}

// ---------------------------------------------------------------------------
// lazy-scaling

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LazyScalingRow {
    pub m: usize,
    pub max_unit_drift: f64,
    pub total_drift_c: f64,
    pub total_drift_a: f64,
    pub steps: usize,
    pub converged: bool,
    pub loss_final: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LazyScalingReport {
    pub eta: f64,
    pub rows: Vec<LazyScalingRow>,
    pub fit: Option<SlopeFit>,
    /// `max / min` of the total c-drift across widths.
    pub total_drift_ratio: Option<f64>,
    pub warnings: Vec<String>,
    pub checks: BTreeMap<String, bool>,
}

pub fn cmd_lazy_scaling(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<LazyScalingReport>, CliError> {
    require_task(cfg, Task::Regression)?;
    check_sweep(cfg)?;
    let base = cfg.shape()?;
    let eta = cfg.train.eta.unwrap_or_else(|| default_gd_eta(base.n_d));
    prepare(out, &resolved(cfg, eta))?;
    let data = cfg.dataset()?;
    let objective = Objective::regression(&data);
    let mut train_cfg = cfg.train.to_train_config(eta);
    train_cfg.chi_every = 0;
    train_cfg.gram_every = 0;
    if cfg.study.seeds == 0 {
        return Err(CliError::Config("lazy-scaling needs at least 1 seed per width".into()));
    }
    let seeds = cfg.study.seeds as u64;
    let jobs: Vec<(usize, u64)> =
        cfg.study.widths.iter().flat_map(|&m| (0..seeds).map(move |s| (m, cfg.init_seed + s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let p0 = init_params(&base.with_width(m), seed)?;
            let o = train(&p0, &objective, &train_cfg, &LazyRadii::unbounded())?;
            let drift = measure_drift(&p0, &o.params);
            Ok(LazyScalingRow {
                m,
                max_unit_drift: max_unit_c_drift(&p0, &o.params),
                total_drift_c: drift.drift_c,
                total_drift_a: drift.drift_a,
                steps: o.records.len() - 1,
                converged: o.converged,
                loss_final: o.final_loss(),
            })
        })
        .collect::<Result<Vec<_>, KanError>>()?;
    // Seed-averaged drift per width; steps and loss report the worst seed.
    let rows: Vec<LazyScalingRow> = runs
        .chunks(seeds as usize)
        .map(|c| {
            let k = c.len() as f64;
            LazyScalingRow {
                m: c[0].m,
                max_unit_drift: c.iter().map(|r| r.max_unit_drift).sum::<f64>() / k,
                total_drift_c: c.iter().map(|r| r.total_drift_c).sum::<f64>() / k,
                total_drift_a: c.iter().map(|r| r.total_drift_a).sum::<f64>() / k,
                steps: c.iter().map(|r| r.steps).max().unwrap_or(0),
                converged: c.iter().all(|r| r.converged),
                loss_final: c.iter().map(|r| r.loss_final).fold(0.0, f64::max),
            }
        })
        .collect();

    let mut warnings = data_warnings(&base, &data);
    for r in rows.iter().filter(|r| !r.converged) {
        warnings.push(format!("width {} did not reach the loss tolerance in {} steps", r.m, r.steps));
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.m as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.max_unit_drift).collect();
    let fit = loglog_slope(&xs, &ys);
    let totals: Vec<f64> = rows.iter().map(|r| r.total_drift_c).collect();
    let lo = totals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = totals.iter().copied().fold(0.0, f64::max);
    let total_drift_ratio = (lo > 0.0).then(|| hi / lo);

    let mut csv = String::from("# schema=1\nm,max_unit_drift,total_drift_c,total_drift_a,steps,converged\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{},{}\n",
            r.m,
            r.max_unit_drift,
            r.total_drift_c,
            r.total_drift_a,
            r.steps,
            u8::from(r.converged)
        ));
    }
    write_file(out, "lazy_scaling.csv", csv.as_bytes())?;

    let mut checks = BTreeMap::new();
    if let (Some(f), Some(ratio)) = (fit, total_drift_ratio) {
        checks.insert("slope".into(), in_window(f.slope));
        checks.insert("total_drift_ratio".into(), ratio <= 3.0);
        checks.insert("converged".into(), rows.iter().all(|r| r.converged));
    } else {
        warnings.push("zero drift at some width; slope not defined".into());
    }
    let report = LazyScalingReport { eta, rows, fit, total_drift_ratio, warnings, checks: checks.clone() };
    finish(out, &checks, report)
}

// ---------------------------------------------------------------------------
// init-loss

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitLossRow {
    pub n_d: usize,
    pub median: f64,
    pub p95: f64,
    pub median_over_n_d: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitLossReport {
    pub seeds: usize,
    pub rows: Vec<InitLossRow>,
    /// `max / min` of `median / n_d`; the band check requires at most 3.
    pub band_ratio: Option<f64>,
    pub warnings: Vec<String>,
    pub checks: BTreeMap<String, bool>,
}

pub fn cmd_init_loss(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<InitLossReport>, CliError> {
    require_task(cfg, Task::Regression)?;
    if cfg.study.n_d_sweep.is_empty() {
        return Err(CliError::Config("study.n_d_sweep is empty".into()));
    }
    if cfg.study.seeds == 0 {
        return Err(CliError::Config("study.seeds must be positive".into()));
    }
    prepare(out, cfg)?;
    let mut warnings = Vec::new();
    if cfg.study.seeds == 1 {
        warnings.push("a single seed makes the median and percentile degenerate".into());
    } else if cfg.study.seeds < 30 {
        warnings.push(format!("{} seeds per n_d; at least 30 are recommended", cfg.study.seeds));
    }
    let rows = cfg
        .study
        .n_d_sweep
        .par_iter()
        .map(|&n_d| {
            let shape = cfg.shape.build_with(cfg.shape.m, n_d)?;
            let losses = (0..cfg.study.seeds as u64)
                .map(|s| {
                    let seed = cfg.init_seed + s;
                    let data = cfg.dataset_for(&shape, seed)?;
                    Ok(Objective::regression(&data).loss(&init_params(&shape, seed)?)?)
                })
                .collect::<Result<Vec<f64>, CliError>>()?;
            let med = median(&losses);
            Ok(InitLossRow { n_d, median: med, p95: percentile(&losses, 95), median_over_n_d: med / n_d as f64 })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let scaled: Vec<f64> = rows.iter().map(|r| r.median_over_n_d).collect();
    let lo = scaled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scaled.iter().copied().fold(0.0, f64::max);
    let band_ratio = (lo > 0.0).then(|| hi / lo);

    let mut csv = String::from("# schema=1\nn_d,median,p95,median_over_n_d\n");
    for r in &rows {
        csv.push_str(&format!("{},{:e},{:e},{:e}\n", r.n_d, r.median, r.p95, r.median_over_n_d));
    }
    write_file(out, "init_loss.csv", csv.as_bytes())?;

    let mut checks = BTreeMap::new();
    match band_ratio {
        Some(r) => {
            checks.insert("band".into(), r <= 3.0);
        }
        None => warnings.push("zero median loss; band ratio undefined".into()),
    }
    let report = InitLossReport { seeds: cfg.study.seeds, rows, band_ratio, warnings, checks: checks.clone() };
    finish(out, &checks, report)
}

// ---------------------------------------------------------------------------
// sgd-expectation

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpectationSummary {
    pub eta: f64,
    pub sigma_min_init: f64,
    pub runs: usize,
    pub loss_init: f64,
    pub mean_final: f64,
    /// `max_t mean L(t) / (1.1 (1 - eta sigma_min)^t L(0))`.
    pub worst_bound_ratio: f64,
    pub t_infinite_fraction: f64,
    pub finite_stopping_times: Vec<usize>,
    pub radii: LazyRadii,
    /// `max_q ||c_q(0)||` next to `M_c / 2`.
    pub init_max_cq: f64,
    pub delta: f64,
    pub delta_tilde: f64,
    pub warnings: Vec<String>,
    pub checks: BTreeMap<String, bool>,
}

pub fn cmd_sgd_expectation(cfg: &ExperimentConfig, out: &Path) -> Result<Outcome<ExpectationSummary>, CliError> {
    require_task(cfg, Task::Regression)?;
    let prep = prepare_run(cfg)?;
    if !prep.stochastic {
        return Err(CliError::Config("sgd-expectation needs train.batch smaller than the data".into()));
    }
    prepare(out, &resolved(cfg, prep.eta))?;
    write_file(out, "gram_init.csv", &prep.gram_csv)?;
    let params = init_params(&prep.shape, cfg.init_seed)?;
    let radii = LazyRadii::from_theory(&prep.shape, prep.sigma_min, cfg.study.radii_delta);
    let mut train_cfg = cfg.train.to_train_config(prep.eta);
    train_cfg.chi_every = 0;
    train_cfg.gram_every = 0;
    let mut warnings = prep.warnings.clone();
    if cfg.study.runs < 10 {
        warnings.push(format!("{} runs; at least 10 are recommended", cfg.study.runs));
    }
    let rep = expectation_harness(&params, &prep.objective, &train_cfg, &radii, cfg.study.runs)?;
    let l0 = rep.mean[0];
    let factor = 1.0 - prep.eta * prep.sigma_min;
    let bound: Vec<f64> = (0..rep.mean.len()).map(|t| 1.1 * factor.powi(t as i32) * l0).collect();
    let worst = rep.mean.iter().zip(&bound).map(|(m, b)| m / b).fold(0.0, f64::max);

    let mut csv = String::from("# schema=1\nt,mean,std_error,conditional_mean,bound\n");
    for t in 0..rep.mean.len() {
        let cond = rep.conditional_mean.as_ref().map(|c| format!("{:e}", c[t])).unwrap_or_default();
        csv.push_str(&format!("{t},{:e},{:e},{cond},{:e}\n", rep.mean[t], rep.std_error[t], bound[t]));
    }
    write_file(out, "expectation.csv", csv.as_bytes())?;

    let mut checks = BTreeMap::new();
    checks.insert("mean_bound".into(), worst <= 1.0);
    checks.insert("t_infinite_fraction".into(), rep.t_infinite_fraction >= 0.95);
    let report = ExpectationSummary {
        eta: prep.eta,
        sigma_min_init: prep.sigma_min,
        runs: rep.num_runs,
        loss_init: l0,
        mean_final: *rep.mean.last().expect("nonempty"),
        worst_bound_ratio: worst,
        t_infinite_fraction: rep.t_infinite_fraction,
        finite_stopping_times: rep.stopping_times.iter().flatten().copied().collect(),
        radii,
        init_max_cq: measure_drift(&params, &params).max_cq,
        delta: cfg.study.delta,
        delta_tilde: cfg.study.delta_tilde,
        warnings,
        checks: checks.clone(),
    };
    finish(out, &checks, report)
}
