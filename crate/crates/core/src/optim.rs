//! Gradient descent and mini-batch SGD with per-step telemetry.
//!
//! Trainers operate on any [`Objective`]; regression helpers wrap a
//! [`Dataset`]. The full loss is evaluated every step (also under SGD) so the
//! recorded curve is always `L(t)`, never the mini-batch loss.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::model::{Dataset, KanParams, ParamGrad};
use crate::ntk::{assemble_d_objective, gram, measure_drift, LazyRadii};
use crate::objective::{Batch, Objective};
use crate::rng::{Stream, BATCH_STREAM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    /// Mini-batch size per residual group. `None`, or sizes equal to the
    /// group sizes, selects full-batch descent with no sampling.
    #[serde(default)]
    pub batch: Option<Vec<usize>>,
    /// Seed of the batch-sampling stream.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss_tolerance: f64,
    /// Cadence of Gram spectrum telemetry; 0 disables.
    #[serde(default)]
    pub gram_every: usize,
    /// Cadence of the linearization-error diagnostic; 0 disables.
    #[serde(default = "default_cadence")]
    pub chi_every: usize,
    #[serde(default = "default_true")]
    pub with_replacement: bool,
}

fn default_cadence() -> usize {
    10
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn gd(eta: f64, steps: usize) -> Self {
        TrainConfig {
            eta,
            steps,
            batch: None,
            seed: 0,
            loss_tolerance: 0.0,
            gram_every: 0,
            chi_every: 0,
            with_replacement: true,
        }
    }

    pub fn sgd(eta: f64, steps: usize, batch: Vec<usize>, seed: u64) -> Self {
        TrainConfig { batch: Some(batch), seed, ..TrainConfig::gd(eta, steps) }
    }

    /// Checks the config against the group sizes of an objective. Multi-group
    /// batches must keep `b_g / N_g` equal across groups.
    pub fn validate(&self, group_sizes: &[usize]) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(KanError::InvalidConfig(format!("eta must be finite and nonnegative, got {}", self.eta)));
        }
        if !(self.loss_tolerance.is_finite() && self.loss_tolerance >= 0.0) {
            return Err(KanError::InvalidConfig("loss_tolerance must be finite and nonnegative".into()));
        }
        if let Some(b) = &self.batch {
            if b.len() != group_sizes.len() {
                return Err(KanError::InvalidConfig(format!(
                    "batch lists {} sizes for {} residual groups",
                    b.len(),
                    group_sizes.len()
                )));
            }
            for (&bg, &ng) in b.iter().zip(group_sizes) {
                if bg == 0 || bg > ng {
                    return Err(KanError::InvalidConfig(format!("batch size {bg} outside [1, {ng}]")));
                }
            }
            for g in 1..b.len() {
                if b[g] * group_sizes[0] != b[0] * group_sizes[g] {
                    return Err(KanError::InvalidConfig(format!(
                        "batch ratios differ: {}/{} vs {}/{}",
                        b[0], group_sizes[0], b[g], group_sizes[g]
                    )));
                }
            }
        }
        Ok(())
    }

    fn is_full_batch(&self, group_sizes: &[usize]) -> bool {
        match &self.batch {
            None => true,
            Some(b) => b.iter().zip(group_sizes).all(|(x, y)| x == y),
        }
    }
}

/// `0.1 / n_d`.
pub fn default_gd_eta(n_d: usize) -> f64 {
    0.1 / n_d as f64
}

/// `0.1 (b/N) sigma_min / n_d^2`.
pub fn default_sgd_eta(b: usize, n: usize, sigma_min: f64, n_d: usize) -> f64 {
    0.1 * (b as f64 / n as f64) * sigma_min / (n_d * n_d) as f64
}

/// `0.05 / (n_d^3 n^4)`.
pub fn default_pinn_eta(n_d: usize, n: usize) -> f64 {
    0.05 / ((n_d as f64).powi(3) * (n as f64).powi(4))
}

/// `b` indices drawn i.i.d. uniform over `0..n`.
pub fn sample_batch(n: usize, b: usize, rng: &mut Stream) -> Vec<usize> {
    (0..b).map(|_| rng.index(n)).collect()
}

/// `b` distinct indices from `0..n` by a partial Fisher-Yates shuffle.
pub fn sample_batch_without_replacement(n: usize, b: usize, rng: &mut Stream) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..b.min(n) {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
    }
    pool.truncate(b.min(n));
    pool
}

fn draw_batch(objective: &Objective, sizes: &[usize], with_replacement: bool, rng: &mut Stream) -> Batch {
    let indices = objective
        .group_sizes()
        .into_iter()
        .zip(sizes)
        .map(
            |(n, &b)| {
                if with_replacement {
                    sample_batch(n, b, rng)
                } else {
                    sample_batch_without_replacement(n, b, rng)
                }
            },
        )
        .collect();
    Batch { indices }
}

/// Regression loss `(1/N) sum (f_i - y_i)^2`.
pub fn loss(params: &KanParams, data: &Dataset) -> Result<f64> {
    Objective::regression(data).loss(params)
}

/// One full-batch step on `objective`.
pub fn objective_gd_step(params: &KanParams, objective: &Objective, eta: f64) -> Result<KanParams> {
    objective_sgd_step(params, objective, eta, &Batch::full(objective))
}

/// One step on the mini-batch loss of `batch`.
pub fn objective_sgd_step(params: &KanParams, objective: &Objective, eta: f64, batch: &Batch) -> Result<KanParams> {
    let raw = objective.raw_residuals(params)?;
    let grad = objective.batch_gradient_from_raw(params, &raw, batch)?;
    if !grad.is_finite() {
        return Err(KanError::Diverged { step: 0, reason: "non-finite gradient".into() });
    }
    let mut next = params.clone();
    next.descend(eta, &grad);
    Ok(next)
}

/// `theta - eta dL/dtheta` for the regression loss.
pub fn gd_step(params: &KanParams, data: &Dataset, eta: f64) -> Result<KanParams> {
    objective_gd_step(params, &Objective::regression(data), eta)
}

/// `theta - eta dL~/dtheta` with `L~ = (1/b) sum_{i in batch} (f_i - y_i)^2`.
pub fn sgd_step(params: &KanParams, data: &Dataset, eta: f64, batch: &[usize]) -> Result<KanParams> {
    objective_sgd_step(params, &Objective::regression(data), eta, &Batch { indices: vec![batch.to_vec()] })
}

/// Telemetry for one recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub loss: f64,
    pub drift_a: f64,
    pub drift_c: f64,
    pub max_cq: f64,
    /// `L(t) / L(t-1)`, absent at `t = 0` or when `L(t-1) = 0`.
    pub contraction: Option<f64>,
    pub sigma_min: Option<f64>,
    /// Norm of the linearization error of the step that produced `t`.
    pub chi_norm: Option<f64>,
    /// True from the stopping time onward.
    pub t_flag: bool,
}

pub const TRAJECTORY_HEADER: &str = "t,loss,drift_a,drift_c,max_cq,contraction,sigma_min,chi_norm,T_flag";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Trajectory as CSV under a `# schema=1` line and [`TRAJECTORY_HEADER`].
pub fn write_trajectory_csv<W: Write>(records: &[TrajectoryRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "# schema=1")?;
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{},{},{},{}",
            r.t,
            r.loss,
            r.drift_a,
            r.drift_c,
            r.max_cq,
            opt(r.contraction),
            opt(r.sigma_min),
            opt(r.chi_norm),
            u8::from(r.t_flag)
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: KanParams,
    pub records: Vec<TrajectoryRecord>,
    /// First step at which a drift quantity exceeded half its radius.
    pub stopping_time: Option<usize>,
    /// Whether the loss reached `loss_tolerance`.
    pub converged: bool,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Runs GD (full batch) or SGD from `params` on `objective`.
///
/// Stops early once `L(t) <= loss_tolerance`. A non-finite loss or gradient
/// aborts with [`KanError::Diverged`] naming the step.
pub fn train(
    params: &KanParams,
    objective: &Objective,
    config: &TrainConfig,
    radii: &LazyRadii,
) -> Result<TrainOutcome> {
    let sizes = objective.group_sizes();
    config.validate(&sizes)?;
    let full = config.is_full_batch(&sizes);
    let mut rng = Stream::new(config.seed ^ BATCH_STREAM);
    let init = params.clone();
    let mut current = params.clone();
    let mut raw = objective.raw_residuals(&current)?;
    let mut loss = objective.loss_from_raw(&raw);
    if !loss.is_finite() {
        return Err(KanError::Diverged { step: 0, reason: format!("initial loss {loss}") });
    }

    let mut stopping_time = None;
    let mut records = Vec::with_capacity(config.steps + 1);
    let record = |t: usize, p: &KanParams, loss: f64, prev: Option<f64>, chi: Option<f64>, st: &mut Option<usize>| {
        let drift = measure_drift(&init, p);
        if st.is_none() && radii.exceeded_by(&drift) {
            *st = Some(t);
        }
        let sigma_min = if config.gram_every > 0 && t.is_multiple_of(config.gram_every) {
            Some(gram(&assemble_d_objective(p, objective)?)?.sigma_min)
        } else {
            None
        };
        Ok::<_, KanError>(TrajectoryRecord {
            t,
            loss,
            drift_a: drift.drift_a,
            drift_c: drift.drift_c,
            max_cq: drift.max_cq,
            contraction: prev.filter(|&l| l > 0.0).map(|l| loss / l),
            sigma_min,
            chi_norm: chi,
            t_flag: st.is_some(),
        })
    };
    records.push(record(0, &current, loss, None, None, &mut stopping_time)?);

    for t in 1..=config.steps {
        if loss <= config.loss_tolerance {
            break;
        }
        let batch = if full {
            Batch::full(objective)
        } else {
            draw_batch(objective, config.batch.as_deref().unwrap_or_default(), config.with_replacement, &mut rng)
        };
        let grad = objective.batch_gradient_from_raw(&current, &raw, &batch)?;
        if !grad.is_finite() {
            return Err(KanError::Diverged { step: t, reason: "non-finite gradient".into() });
        }
        let want_chi = config.chi_every > 0 && (t - 1) % config.chi_every == 0;
        let columns = if want_chi { Some(assemble_d_objective(&current, objective)?) } else { None };
        let mut next = current.clone();
        next.descend(config.eta, &grad);
        let next_raw = objective.raw_residuals(&next)?;
        let next_loss = objective.loss_from_raw(&next_raw);
        if !next_loss.is_finite() {
            return Err(KanError::Diverged { step: t, reason: format!("loss became {next_loss}") });
        }
        let chi = match columns {
            Some(d) => {
                let s0 = objective.normalize(&raw);
                let s1 = objective.normalize(&next_raw);
                Some(chi_from_columns(&d, &current, &next, &s0, &s1).1)
            }
            None => None,
        };
        records.push(record(t, &next, next_loss, Some(loss), chi, &mut stopping_time)?);
        current = next;
        raw = next_raw;
        loss = next_loss;
    }
    let converged = loss <= config.loss_tolerance;
    Ok(TrainOutcome { params: current, records, stopping_time, converged })
}

/// Regression convenience wrapper around [`train`].
pub fn train_regression(
    params: &KanParams,
    data: &Dataset,
    config: &TrainConfig,
    radii: &LazyRadii,
) -> Result<TrainOutcome> {
    train(params, &Objective::regression(data), config, radii)
}

fn chi_from_columns(
    d: &crate::ntk::DerivMatrix,
    before: &KanParams,
    after: &KanParams,
    s0: &[f64],
    s1: &[f64],
) -> (Vec<f64>, f64) {
    let delta: Vec<f64> = after.to_flat().iter().zip(before.to_flat()).map(|(x, y)| x - y).collect();
    let lin = d.transpose_apply(&delta);
    let chi: Vec<f64> = (0..s0.len()).map(|i| s1[i] - s0[i] - lin[i]).collect();
    let norm = chi.iter().map(|v| v * v).sum::<f64>().sqrt();
    (chi, norm)
}

/// Linearization error of one step:
/// `chi_i = s_i(t+1) - s_i(t) - <ds_i(t)/dtheta, theta(t+1) - theta(t)>`.
pub fn compute_chi(
    params_t: &KanParams,
    params_t1: &KanParams,
    objective: &Objective,
    residuals_t: &[f64],
    residuals_t1: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if params_t.shape() != params_t1.shape() {
        return Err(KanError::InvalidShape("parameter snapshots have different shapes".into()));
    }
    let n = objective.num_terms();
    if residuals_t.len() != n || residuals_t1.len() != n {
        return Err(KanError::DimensionMismatch { expected: n, got: residuals_t.len().min(residuals_t1.len()) });
    }
    let d = assemble_d_objective(params_t, objective)?;
    Ok(chi_from_columns(&d, params_t, params_t1, residuals_t, residuals_t1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionFit {
    /// Geometric mean of `L(t+1)/L(t)`.
    pub rho_hat: f64,
    pub num_ratios: usize,
}

impl ContractionFit {
    /// `1 - eta sigma_min / 2`.
    pub fn gd_ceiling(eta: f64, sigma_min: f64) -> f64 {
        1.0 - eta * sigma_min / 2.0
    }
}

/// Fits the per-step ratio on the longest prefix whose losses exceed `1e-14`.
/// Requires at least 10 ratios.
pub fn fit_contraction(losses: &[f64]) -> Result<ContractionFit> {
    let usable = losses.iter().take_while(|&&l| l > 1e-14 && l.is_finite()).count();
    if usable < 11 {
        return Err(KanError::SeriesTooShort(format!("{} usable losses, need 11", usable)));
    }
    let ratios = usable - 1;
    let log_sum: f64 = (0..ratios).map(|t| (losses[t + 1] / losses[t]).ln()).sum();
    Ok(ContractionFit { rho_hat: (log_sum / ratios as f64).exp(), num_ratios: ratios })
}

/// Seed-averaged loss curves at a fixed initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectationReport {
    pub num_runs: usize,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Mean over runs whose stopping time is infinite; `None` if there are none.
    pub conditional_mean: Option<Vec<f64>>,
    pub t_infinite_fraction: f64,
    pub stopping_times: Vec<Option<usize>>,
}

/// Runs `num_runs` trainings from `params` with batch seeds
/// `config.seed, config.seed + 1, ...`. Runs that stop early at the loss
/// tolerance are padded with their final loss.
pub fn expectation_harness(
    params: &KanParams,
    objective: &Objective,
    config: &TrainConfig,
    radii: &LazyRadii,
    num_runs: usize,
) -> Result<ExpectationReport> {
    if num_runs == 0 {
        return Err(KanError::InvalidConfig("num_runs must be positive".into()));
    }
    let outcomes = (0..num_runs)
        .into_par_iter()
        .map(|r| {
            let cfg = TrainConfig { seed: config.seed.wrapping_add(r as u64), ..config.clone() };
            train(params, objective, &cfg, radii)
        })
        .collect::<Result<Vec<_>>>()?;
    let len = config.steps + 1;
    let curves: Vec<Vec<f64>> = outcomes
        .iter()
        .map(|o| {
            let mut c = o.losses();
            let last = *c.last().unwrap_or(&f64::NAN);
            c.resize(len, last);
            c
        })
        .collect();
    let mean = column_mean(&curves, len);
    let std_error = if num_runs < 2 {
        vec![0.0; len]
    } else {
        (0..len)
            .map(|t| {
                let var = curves.iter().map(|c| (c[t] - mean[t]).powi(2)).sum::<f64>() / (num_runs - 1) as f64;
                (var / num_runs as f64).sqrt()
            })
            .collect()
    };
    let stopping_times: Vec<Option<usize>> = outcomes.iter().map(|o| o.stopping_time).collect();
    let good: Vec<Vec<f64>> =
        curves.iter().zip(&stopping_times).filter(|(_, st)| st.is_none()).map(|(c, _)| c.clone()).collect();
    let conditional_mean = if good.is_empty() { None } else { Some(column_mean(&good, len)) };
    Ok(ExpectationReport {
        num_runs,
        mean,
        std_error,
        conditional_mean,
        t_infinite_fraction: good.len() as f64 / num_runs as f64,
        stopping_times,
    })
}

fn column_mean(curves: &[Vec<f64>], len: usize) -> Vec<f64> {
    (0..len).map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64).collect()
}

/// Average of the per-batch gradients over every batch in `batches`.
pub fn mean_batch_gradient(params: &KanParams, objective: &Objective, batches: &[Batch]) -> Result<ParamGrad> {
    let raw = objective.raw_residuals(params)?;
    let mut acc = ParamGrad::zeros(params.shape());
    for b in batches {
        let g = objective.batch_gradient_from_raw(params, &raw, b)?;
        acc.a.iter_mut().zip(&g.a).for_each(|(x, y)| *x += y);
        acc.c.iter_mut().zip(&g.c).for_each(|(x, y)| *x += y);
    }
    let k = batches.len() as f64;
    acc.a.iter_mut().for_each(|x| *x /= k);
    acc.c.iter_mut().for_each(|x| *x /= k);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisSpec, TransformSpec};
    use crate::gradcheck::{central_difference, vec_rel_err};
    use crate::model::{init_params, KanShape};

    fn setup(m: usize, n_samples: usize) -> (KanParams, Dataset) {
        let shape = KanShape::uniform(2, m, BasisSpec::chebyshev(3), TransformSpec::Tanh).unwrap();
        let p = init_params(&shape, 11).unwrap();
        let mut rng = Stream::new(5);
        let x: Vec<f64> = (0..2 * n_samples).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let y = (0..n_samples).map(|i| (x[2 * i] + 0.5 * x[2 * i + 1]).sin()).collect();
        (p, Dataset::new(2, x, y).unwrap())
    }

    #[test]
    fn loss_examples() {
        let shape = KanShape::uniform(1, 1, BasisSpec::monomial(1), TransformSpec::Identity).unwrap();
        let p = KanParams::from_parts(shape, vec![0.0], vec![1.0]).unwrap();
        let data = Dataset::new(1, vec![0.0, 1.0], vec![0.0, 2.0]).unwrap();
        assert_eq!(loss(&p, &data).unwrap(), 1.0);
        let perfect = Dataset::new(1, vec![0.3], vec![1.0]).unwrap();
        assert_eq!(loss(&p, &perfect).unwrap(), 0.0);
    }

    #[test]
    fn zero_step_size_is_a_fixed_point() {
        let (p, data) = setup(4, 5);
        let q = gd_step(&p, &data, 0.0).unwrap();
        assert_eq!(q.to_flat(), p.to_flat());
        let out = train_regression(&p, &data, &TrainConfig::gd(0.0, 5), &LazyRadii::unbounded()).unwrap();
        assert_eq!(out.params.to_flat(), p.to_flat());
    }

    #[test]
    fn constant_network_gd_contracts_by_one_minus_two_eta() {
        // f = c for m = 1 with constant bases; L = (c - y)^2, so e <- e (1 - 2 eta)
        let shape = KanShape::uniform(1, 1, BasisSpec::monomial(1), TransformSpec::Identity).unwrap();
        let p = KanParams::from_parts(shape, vec![0.4], vec![3.0]).unwrap();
        let data = Dataset::new(1, vec![0.2], vec![1.0]).unwrap();
        let eta = 0.1;
        let q = gd_step(&p, &data, eta).unwrap();
        assert!(((q.c()[0] - 1.0) - 2.0 * (1.0 - 2.0 * eta)).abs() < 1e-15);
        assert_eq!(q.a()[0], 0.4);
    }

    #[test]
    fn gd_direction_matches_finite_differences() {
        let (p, data) = setup(5, 4);
        let eta = 1e-3;
        let q = gd_step(&p, &data, eta).unwrap();
        let step: Vec<f64> = p.to_flat().iter().zip(q.to_flat()).map(|(a, b)| (a - b) / eta).collect();
        let shape = p.shape().clone();
        let fd = central_difference(&p.to_flat(), 1e-5, |t| {
            loss(&KanParams::from_flat(shape.clone(), t).unwrap(), &data).unwrap()
        });
        assert!(vec_rel_err(&step, &fd) <= 1e-6);
    }

    #[test]
    fn sampling_examples() {
        let mut rng = Stream::new(0);
        assert_eq!(sample_batch(1, 1, &mut rng), vec![0]);
        let mut a = Stream::new(9);
        let mut b = Stream::new(9);
        assert_eq!(sample_batch(10, 6, &mut a), sample_batch(10, 6, &mut b));
        let mut counts = [0usize; 4];
        let mut rng = Stream::new(1);
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_batch(4, 1, &mut rng)[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() <= 0.01);
        }
        let mut rng = Stream::new(2);
        let mut s = sample_batch_without_replacement(7, 7, &mut rng);
        s.sort();
        assert_eq!(s, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn full_enumeration_batch_equals_gd_bit_exactly() {
        let (p, data) = setup(6, 5);
        let gd = gd_step(&p, &data, 0.05).unwrap();
        let sgd = sgd_step(&p, &data, 0.05, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!(gd.to_flat(), sgd.to_flat());
    }

    #[test]
    fn singleton_batches_average_to_full_gradient() {
        let (p, data) = setup(6, 6);
        let obj = Objective::regression(&data);
        let batches: Vec<Batch> = (0..6).map(|i| Batch { indices: vec![vec![i]] }).collect();
        let avg = mean_batch_gradient(&p, &obj, &batches).unwrap();
        let full = obj.gradient(&p).unwrap();
        for (x, y) in avg.to_flat().iter().zip(full.to_flat()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_steps_gives_single_record() {
        let (p, data) = setup(4, 4);
        let out = train_regression(&p, &data, &TrainConfig::gd(0.1, 0), &LazyRadii::unbounded()).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!((out.records[0].drift_a, out.records[0].drift_c), (0.0, 0.0));
        assert_eq!(out.records[0].contraction, None);
    }

    #[test]
    fn full_batch_sgd_trajectory_equals_gd() {
        let (p, data) = setup(8, 6);
        let gd = train_regression(&p, &data, &TrainConfig::gd(0.05, 40), &LazyRadii::unbounded()).unwrap();
        let sgd =
            train_regression(&p, &data, &TrainConfig::sgd(0.05, 40, vec![6], 77), &LazyRadii::unbounded()).unwrap();
        assert_eq!(gd.records, sgd.records);
        assert_eq!(gd.params.to_flat(), sgd.params.to_flat());
    }

    #[test]
    fn chi_vanishes_for_zero_step_and_linear_models() {
        let (p, data) = setup(4, 4);
        let obj = Objective::regression(&data);
        let s = obj.residuals(&p).unwrap();
        let (chi, norm) = compute_chi(&p, &p, &obj, &s, &s).unwrap();
        assert!(chi.iter().all(|&v| v == 0.0) && norm == 0.0);

        let shape = KanShape::uniform(2, 3, BasisSpec::monomial(1), TransformSpec::Identity).unwrap();
        let lin = init_params(&shape, 4).unwrap();
        let obj = Objective::regression(&data);
        let next = objective_gd_step(&lin, &obj, 0.3).unwrap();
        let (_, norm) =
            compute_chi(&lin, &next, &obj, &obj.residuals(&lin).unwrap(), &obj.residuals(&next).unwrap()).unwrap();
        assert!(norm <= 1e-12);
    }

    #[test]
    fn chi_is_second_order_in_step() {
        let (p, data) = setup(6, 5);
        let obj = Objective::regression(&data);
        let s = obj.residuals(&p).unwrap();
        let norms: Vec<f64> = [1e-2, 1e-3]
            .iter()
            .map(|&eta| {
                let q = objective_gd_step(&p, &obj, eta).unwrap();
                compute_chi(&p, &q, &obj, &s, &obj.residuals(&q).unwrap()).unwrap().1
            })
            .collect();
        let ratio = norms[0] / norms[1];
        assert!((ratio - 100.0).abs() < 5.0, "ratio {ratio}");
    }

    #[test]
    fn contraction_examples() {
        let geo: Vec<f64> = (0..30).map(|t| 0.9f64.powi(t)).collect();
        assert!((fit_contraction(&geo).unwrap().rho_hat - 0.9).abs() < 1e-12);
        assert!((fit_contraction(&[2.0; 20]).unwrap().rho_hat - 1.0).abs() < 1e-15);
        assert!(fit_contraction(&[1.0; 5]).is_err());
        assert!(fit_contraction(&[1.0, 1e-20, 1e-20, 1e-20, 1e-20, 1e-20, 1e-20, 1e-20, 1e-20, 1e-20, 1e-20]).is_err());
    }

    #[test]
    fn harness_examples() {
        let (p, data) = setup(6, 4);
        let obj = Objective::regression(&data);
        let cfg = TrainConfig::sgd(0.05, 20, vec![2], 3);
        let one = expectation_harness(&p, &obj, &cfg, &LazyRadii::unbounded(), 1).unwrap();
        let run = train(&p, &obj, &cfg, &LazyRadii::unbounded()).unwrap();
        assert_eq!(one.mean, run.losses());
        let full = TrainConfig::sgd(0.05, 20, vec![4], 3);
        let rep = expectation_harness(&p, &obj, &full, &LazyRadii::unbounded(), 4).unwrap();
        assert!(rep.std_error.iter().all(|&s| s == 0.0));
        assert_eq!(rep.t_infinite_fraction, 1.0);
    }

    #[test]
    fn permutation_invariance() {
        let (p, data) = setup(5, 6);
        let obj = Objective::regression(&data);
        let perm = vec![vec![3, 0, 5, 1, 4, 2]];
        let shuffled = obj.permuted(&perm).unwrap();
        assert!((obj.loss(&p).unwrap() - shuffled.loss(&p).unwrap()).abs() <= 1e-12);
        let g1 = obj.gradient(&p).unwrap().to_flat();
        let g2 = shuffled.gradient(&p).unwrap().to_flat();
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::gd(-1.0, 1).validate(&[4]).is_err());
        assert!(TrainConfig::sgd(0.1, 1, vec![5], 0).validate(&[4]).is_err());
        assert!(TrainConfig::sgd(0.1, 1, vec![16, 4], 0).validate(&[64, 16]).is_ok());
        assert!(TrainConfig::sgd(0.1, 1, vec![16, 5], 0).validate(&[64, 16]).is_err());
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (p, data) = setup(4, 4);
        let err = train_regression(&p, &data, &TrainConfig::gd(1e200, 10), &LazyRadii::unbounded()).unwrap_err();
        assert!(matches!(err, KanError::Diverged { .. }));
    }

    #[test]
    fn trajectory_csv_layout() {
        let (p, data) = setup(4, 4);
        let out = train_regression(&p, &data, &TrainConfig::gd(0.05, 3), &LazyRadii::unbounded()).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&out.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# schema=1");
        assert_eq!(lines[1], TRAJECTORY_HEADER);
        assert_eq!(lines.len(), 6);
    }
}
