//! Central finite differences and the error measures used to compare them
//! with analytic derivatives.
//!
//! Scalars are compared by `|a - b| / max(|a|, |b|, 1)`. Vectors (gradient
//! blocks) are compared normwise: `||a - b||_inf / max(||a||_inf, ||b||_inf)`,
//! which is exactly zero when both blocks vanish.
//!
//! [`oracle_suite`] runs every analytic derivative in the crate against
//! these differences on random small instances.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, TransformSpec};
use crate::error::Result;
use crate::model::{
    forward, init_params, input_derivatives, operator_value, param_grad, param_grad_of_operator, predict, KanParams,
    KanShape, OperatorCoefficients,
};
use crate::pinn::{pde_loss, pde_loss_grad, LinearPde, PdeProblem};
use crate::rng::Stream;

/// Central difference of `f` with respect to every coordinate of `theta`.
pub fn central_difference<F>(theta: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = f(&work);
            work[i] = orig - h;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn vec_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        return 0.0;
    }
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    diff / scale
}

/// Finite-difference step for every block.
pub const FD_STEP: f64 = 1e-5;
pub const PARAM_TOLERANCE: f64 = 1e-6;
pub const INPUT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub instances: usize,
    pub seed: u64,
    #[serde(default = "default_max_m")]
    pub max_m: usize,
    #[serde(default = "default_max_n")]
    pub max_n: usize,
    #[serde(default = "default_max_n_d")]
    pub max_n_d: usize,
    /// Zero the outer coefficients of every instance.
    #[serde(default)]
    pub zero_outer: bool,
    /// Flip the sign of the analytic `df/dc` block; the suite must then fail.
    #[serde(default)]
    pub negative_control: bool,
}

fn default_max_m() -> usize {
    8
}
fn default_max_n() -> usize {
    3
}
fn default_max_n_d() -> usize {
    5
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            instances: 100,
            seed: 0,
            max_m: 8,
            max_n: 3,
            max_n_d: 5,
            zero_outer: false,
            negative_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub instances: usize,
    pub blocks: Vec<BlockResult>,
    pub passed: bool,
}

pub const BLOCKS: [(&str, f64); 7] = [
    ("df/da", PARAM_TOLERANCE),
    ("df/dc", PARAM_TOLERANCE),
    ("df/dx", INPUT_TOLERANCE),
    ("d2f/dx2", INPUT_TOLERANCE),
    ("dD[f]/da", INPUT_TOLERANCE),
    ("dD[f]/dc", INPUT_TOLERANCE),
    ("dL_pde/dtheta", INPUT_TOLERANCE),
];

fn random_shape(rng: &mut Stream, cfg: &OracleConfig) -> Result<KanShape> {
    let n = 1 + rng.index(cfg.max_n.max(1));
    let m = 1 + rng.index(cfg.max_m.max(1));
    let n_d = 1 + rng.index(cfg.max_n_d.max(1));
    let basis = match rng.index(3) {
        0 => BasisSpec::chebyshev(n_d),
        1 => BasisSpec::gaussian_rbf_uniform(n_d, -1.0, 1.0),
        _ => BasisSpec::monomial(n_d),
    };
    let transform = if rng.index(2) == 0 { TransformSpec::Tanh } else { TransformSpec::Sigmoid };
    KanShape::uniform(n, m, basis, transform)
}

fn random_operator(rng: &mut Stream, n: usize) -> OperatorCoefficients {
    let mut op = OperatorCoefficients::zeros(n);
    op.zeroth = rng.uniform_in(-1.0, 1.0);
    for i in 0..n {
        op.first[i] = rng.uniform_in(-1.0, 1.0);
        for j in 0..=i {
            let v = rng.uniform_in(-1.0, 1.0);
            op.second[i * n + j] = v;
            op.second[j * n + i] = v;
        }
    }
    op
}

/// Constant-coefficient problem with smooth random data fields.
fn random_problem(rng: &mut Stream, n: usize) -> Result<PdeProblem> {
    let mut h = vec![0.0; n * n];
    for i in 1..n {
        for j in 1..=i {
            let v = rng.uniform_in(-0.5, 0.5);
            h[i * n + j] = v;
            h[j * n + i] = v;
        }
    }
    let g: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let l = rng.uniform_in(-1.0, 1.0);
    let pde = LinearPde::new(n, Arc::new(move |_| h.clone()), Arc::new(move |_| g.clone()), Arc::new(move |_| l))?;
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
    let w2 = w.clone();
    let n1 = 1 + rng.index(4);
    let n2 = 1 + rng.index(4);
    let point = |rng: &mut Stream| (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect::<Vec<f64>>();
    let interior = (0..n1).map(|_| point(rng)).collect();
    let boundary = (0..n2).map(|_| point(rng)).collect();
    PdeProblem::new(
        pde,
        Arc::new(move |x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>().sin()),
        Arc::new(move |x| x.iter().zip(&w2).map(|(a, b)| a * b).sum::<f64>().cos()),
        interior,
        boundary,
    )
}

/// Worst block error of every analytic derivative over `cfg.instances`
/// random instances.
pub fn oracle_suite(cfg: &OracleConfig) -> Result<OracleReport> {
    let mut worst = [0.0f64; BLOCKS.len()];
    let mut rng = Stream::new(cfg.seed);
    for _ in 0..cfg.instances {
        let shape = random_shape(&mut rng, cfg)?;
        let mut params = init_params(&shape, rng.index(1 << 30) as u64)?;
        if cfg.zero_outer {
            params.c_mut().iter_mut().for_each(|c| *c = 0.0);
        }
        let n = shape.n;
        let na = shape.num_a();
        let x: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let theta = params.to_flat();
        let rebuild = |t: &[f64]| KanParams::from_flat(shape.clone(), t).expect("shape preserved");

        let (_, cache) = forward(&params, &x)?;
        let mut g = param_grad(&params, &x, &cache)?;
        if cfg.negative_control {
            g.c.iter_mut().for_each(|v| *v = -*v);
        }
        let fd = central_difference(&theta, FD_STEP, |t| predict(&rebuild(t), &x).expect("valid input"));
        worst[0] = worst[0].max(vec_rel_err(&g.a, &fd[..na]));
        worst[1] = worst[1].max(vec_rel_err(&g.c, &fd[na..]));

        let d = input_derivatives(&params, &x, 2)?;
        let fd = central_difference(&x, FD_STEP, |y| predict(&params, y).expect("valid input"));
        worst[2] = worst[2].max(vec_rel_err(&d.gradient, &fd));
        let hess = d.hessian.unwrap_or_default();
        let mut fd_hess = Vec::with_capacity(n * n);
        for i in 0..n {
            fd_hess.extend(central_difference(&x, FD_STEP, |y| {
                input_derivatives(&params, y, 1).expect("valid input").gradient[i]
            }));
        }
        worst[3] = worst[3].max(vec_rel_err(&hess, &fd_hess));

        let op = random_operator(&mut rng, n);
        let g = param_grad_of_operator(&params, &x, &op)?;
        let fd = central_difference(&theta, FD_STEP, |t| operator_value(&rebuild(t), &x, &op).expect("valid input"));
        worst[4] = worst[4].max(vec_rel_err(&g.a, &fd[..na]));
        worst[5] = worst[5].max(vec_rel_err(&g.c, &fd[na..]));

        let problem = random_problem(&mut rng, n)?;
        let g = pde_loss_grad(&params, &problem)?;
        let fd = central_difference(&theta, FD_STEP, |t| pde_loss(&rebuild(t), &problem).expect("valid problem"));
        worst[6] = worst[6].max(vec_rel_err(&g.to_flat(), &fd));
    }
    let blocks: Vec<BlockResult> = BLOCKS
        .iter()
        .zip(worst)
        .map(|(&(name, tolerance), w)| BlockResult { name: name.into(), worst: w, tolerance, passed: w <= tolerance })
        .collect();
    let passed = blocks.iter().all(|b| b.passed);
    Ok(OracleReport { instances: cfg.instances, blocks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |t| t[0] * t[0] + 3.0 * t[1]);
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn suite_passes_and_negative_control_fails() {
        let cfg = OracleConfig { instances: 20, ..OracleConfig::default() };
        let rep = oracle_suite(&cfg).unwrap();
        assert!(rep.passed, "{rep:?}");
        let bad = oracle_suite(&OracleConfig { negative_control: true, ..cfg.clone() }).unwrap();
        assert!(!bad.passed);
        assert!(!bad.blocks[1].passed && bad.blocks[0].passed);
        let zero = oracle_suite(&OracleConfig { zero_outer: true, ..cfg }).unwrap();
        assert_eq!(zero.blocks[0].worst, 0.0);
        assert_eq!(zero.blocks[4].worst, 0.0);
    }

    #[test]
    fn zero_blocks_compare_exactly() {
        assert_eq!(vec_rel_err(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!(vec_rel_err(&[1.0, 0.0], &[1.0, 1e-3]) > 1e-4);
    }
}
