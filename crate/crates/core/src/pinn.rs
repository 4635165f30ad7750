//! Physics-informed losses for linear second-order operators
//!
//! `D[u] = du/dx_1 - sum_{i,j>=2} h_ij d2u/dx_i dx_j - sum_{i>=2} g_i du/dx_i - l u`
//!
//! where coordinate 1 is time. Only this linear form is representable, so
//! nonlinear residuals cannot be constructed.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::model::{input_derivatives, predict, KanParams, OperatorCoefficients, ParamGrad, ResidualTerm};
use crate::objective::{Batch, Objective};
use crate::optim::sample_batch;
use crate::rng::{Stream, DATA_STREAM};

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Returns a length-`n` vector; entry 0 (time) is ignored.
pub type VectorField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
/// Returns an `n x n` row-major matrix; row and column 0 are ignored.
pub type MatrixField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Coefficient fields `h`, `g`, `l` of the operator.
#[derive(Clone)]
pub struct LinearPde {
    n: usize,
    h: MatrixField,
    g: VectorField,
    l: ScalarField,
}

impl fmt::Debug for LinearPde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearPde").field("n", &self.n).finish_non_exhaustive()
    }
}

impl LinearPde {
    pub fn new(n: usize, h: MatrixField, g: VectorField, l: ScalarField) -> Result<Self> {
        if n < 1 {
            return Err(KanError::InvalidShape("operator needs n >= 1".into()));
        }
        Ok(LinearPde { n, h, g, l })
    }

    /// `du/dx_1` only.
    pub fn transport_free(n: usize) -> Self {
        LinearPde {
            n,
            h: Arc::new(move |_| vec![0.0; n * n]),
            g: Arc::new(move |_| vec![0.0; n]),
            l: Arc::new(|_| 0.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Operator at `x` in the form consumed by the model kernels.
    pub fn coefficients(&self, x: &[f64]) -> Result<OperatorCoefficients> {
        let n = self.n;
        if x.len() != n {
            return Err(KanError::DimensionMismatch { expected: n, got: x.len() });
        }
        let h = (self.h)(x);
        let g = (self.g)(x);
        if h.len() != n * n || g.len() != n {
            return Err(KanError::InvalidShape("coefficient field has the wrong size".into()));
        }
        let mut op = OperatorCoefficients::zeros(n);
        op.zeroth = -(self.l)(x);
        op.first[0] = 1.0;
        for i in 1..n {
            op.first[i] = -g[i];
            for j in 1..n {
                let asym = (h[i * n + j] - h[j * n + i]).abs();
                if asym > 1e-12 {
                    return Err(KanError::NotSymmetric(asym));
                }
                op.second[i * n + j] = -h[i * n + j];
            }
        }
        let all = std::iter::once(op.zeroth).chain(op.first.iter().copied()).chain(op.second.iter().copied());
        if let Some(v) = all.into_iter().find(|v| !v.is_finite()) {
            return Err(KanError::NonFinite(v));
        }
        Ok(op)
    }
}

/// Value, gradient and row-major Hessian at a point.
pub trait TwiceDifferentiable: Sync {
    fn dim(&self) -> usize;
    fn jet(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;
}

impl TwiceDifferentiable for KanParams {
    fn dim(&self) -> usize {
        self.shape().n
    }

    fn jet(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let d = input_derivatives(self, x, 2)?;
        Ok((d.value, d.gradient, d.hessian.unwrap_or_default()))
    }
}

pub type JetFn = Arc<dyn Fn(&[f64]) -> (f64, Vec<f64>, Vec<f64>) + Send + Sync>;

/// A closed-form function supplied with its derivatives.
#[derive(Clone)]
pub struct AnalyticFunction {
    n: usize,
    jet: JetFn,
}

impl fmt::Debug for AnalyticFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticFunction").field("n", &self.n).finish_non_exhaustive()
    }
}

impl AnalyticFunction {
    pub fn new(n: usize, jet: JetFn) -> Self {
        AnalyticFunction { n, jet }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.jet)(x).0
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &AnalyticFunction, beta: f64) -> AnalyticFunction {
        let (u, w) = (self.jet.clone(), other.jet.clone());
        AnalyticFunction::new(
            self.n,
            Arc::new(move |x| {
                let (a0, a1, a2) = u(x);
                let (b0, b1, b2) = w(x);
                let lin = |p: Vec<f64>, q: Vec<f64>| p.iter().zip(&q).map(|(s, t)| alpha * s + beta * t).collect();
                (alpha * a0 + beta * b0, lin(a1, b1), lin(a2, b2))
            }),
        )
    }
}

impl TwiceDifferentiable for AnalyticFunction {
    fn dim(&self) -> usize {
        self.n
    }

    fn jet(&self, x: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        if x.len() != self.n {
            return Err(KanError::DimensionMismatch { expected: self.n, got: x.len() });
        }
        Ok((self.jet)(x))
    }
}

/// `D[u](x)`.
pub fn apply_operator(pde: &LinearPde, u: &dyn TwiceDifferentiable, x: &[f64]) -> Result<f64> {
    if u.dim() != pde.n {
        return Err(KanError::DimensionMismatch { expected: pde.n, got: u.dim() });
    }
    let op = pde.coefficients(x)?;
    let (v, g, h) = u.jet(x)?;
    Ok(op.apply(v, &g, &h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Heat1d,
    Advection1d,
}

impl FromStr for ProblemKind {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat1d" => Ok(ProblemKind::Heat1d),
            "advection1d" => Ok(ProblemKind::Advection1d),
            other => Err(KanError::InvalidConfig(format!("unsupported problem kind '{other}'"))),
        }
    }
}

/// Enough to regenerate a manufactured problem exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDescriptor {
    pub kind: ProblemKind,
    pub n1: usize,
    pub n2: usize,
    pub seed: u64,
}

/// Operator, data fields and sampled collocation points.
#[derive(Clone)]
pub struct PdeProblem {
    pub pde: LinearPde,
    pub source: ScalarField,
    pub boundary: ScalarField,
    pub exact: Option<AnalyticFunction>,
    pub descriptor: Option<ProblemDescriptor>,
    interior: Vec<Vec<f64>>,
    interior_targets: Vec<f64>,
    boundary_points: Vec<Vec<f64>>,
    boundary_targets: Vec<f64>,
}

impl fmt::Debug for PdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PdeProblem")
            .field("n", &self.pde.n)
            .field("n1", &self.interior.len())
            .field("n2", &self.boundary_points.len())
            .field("descriptor", &self.descriptor)
            .finish_non_exhaustive()
    }
}

impl PdeProblem {
    /// Targets are `source` at interior points and `boundary` at boundary points.
    pub fn new(
        pde: LinearPde,
        source: ScalarField,
        boundary: ScalarField,
        interior: Vec<Vec<f64>>,
        boundary_points: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if interior.is_empty() || boundary_points.is_empty() {
            return Err(KanError::InvalidData("need at least one interior and one boundary point".into()));
        }
        for x in interior.iter().chain(&boundary_points) {
            if x.len() != pde.n {
                return Err(KanError::DimensionMismatch { expected: pde.n, got: x.len() });
            }
            if let Some(v) = x.iter().find(|v| !v.is_finite()) {
                return Err(KanError::NonFinite(*v));
            }
            // rejects asymmetric h up front
            pde.coefficients(x)?;
        }
        let interior_targets = interior.iter().map(|x| source(x)).collect();
        let boundary_targets = boundary_points.iter().map(|x| boundary(x)).collect();
        Ok(PdeProblem {
            pde,
            source,
            boundary,
            exact: None,
            descriptor: None,
            interior,
            interior_targets,
            boundary_points,
            boundary_targets,
        })
    }

    pub fn n1(&self) -> usize {
        self.interior.len()
    }

    pub fn n2(&self) -> usize {
        self.boundary_points.len()
    }

    pub fn interior_points(&self) -> &[Vec<f64>] {
        &self.interior
    }

    pub fn interior_targets(&self) -> &[f64] {
        &self.interior_targets
    }

    pub fn boundary_points(&self) -> &[Vec<f64>] {
        &self.boundary_points
    }

    pub fn boundary_targets(&self) -> &[f64] {
        &self.boundary_targets
    }

    /// Interior operator residuals, then boundary value residuals.
    pub fn objective(&self) -> Result<Objective> {
        let interior = self
            .interior
            .iter()
            .zip(&self.interior_targets)
            .map(|(x, &v)| Ok(ResidualTerm::linear(x.clone(), self.pde.coefficients(x)?, v)))
            .collect::<Result<Vec<_>>>()?;
        let boundary = self
            .boundary_points
            .iter()
            .zip(&self.boundary_targets)
            .map(|(x, &u)| ResidualTerm::value(x.clone(), u))
            .collect();
        Objective::new(vec![interior, boundary])
    }
}

/// `(1/N1) sum (D[f](x_i) - v_i)^2 + (1/N2) sum (f(xbar_i) - u_i)^2`.
pub fn pde_loss(params: &KanParams, problem: &PdeProblem) -> Result<f64> {
    problem.objective()?.loss(params)
}

/// The same loss with an arbitrary twice-differentiable function in place of the network.
pub fn pde_loss_of(u: &dyn TwiceDifferentiable, problem: &PdeProblem) -> Result<f64> {
    let mut interior = 0.0;
    for (x, v) in problem.interior.iter().zip(&problem.interior_targets) {
        let r = apply_operator(&problem.pde, u, x)? - v;
        interior += r * r;
    }
    let mut boundary = 0.0;
    for (x, t) in problem.boundary_points.iter().zip(&problem.boundary_targets) {
        let r = u.jet(x)?.0 - t;
        boundary += r * r;
    }
    Ok(interior / problem.n1() as f64 + boundary / problem.n2() as f64)
}

pub fn pde_loss_grad(params: &KanParams, problem: &PdeProblem) -> Result<ParamGrad> {
    problem.objective()?.gradient(params)
}

/// Mini-batch sizes with `b1 / N1 = b2 / N2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinnBatchConfig {
    b1: usize,
    b2: usize,
}

impl PinnBatchConfig {
    pub fn new(b1: usize, b2: usize, n1: usize, n2: usize) -> Result<Self> {
        if b1 == 0 || b1 > n1 || b2 == 0 || b2 > n2 {
            return Err(KanError::InvalidConfig(format!("batch sizes ({b1}, {b2}) outside [1, {n1}] x [1, {n2}]")));
        }
        if b1 * n2 != b2 * n1 {
            return Err(KanError::InvalidConfig(format!("b1/N1 = {b1}/{n1} differs from b2/N2 = {b2}/{n2}")));
        }
        Ok(PinnBatchConfig { b1, b2 })
    }

    pub fn b1(&self) -> usize {
        self.b1
    }

    pub fn b2(&self) -> usize {
        self.b2
    }

    pub fn sizes(&self) -> Vec<usize> {
        vec![self.b1, self.b2]
    }
}

/// `(1/b1) sum_I r_i^2 + (1/b2) sum_Ibar rbar_i^2` on freshly drawn index
/// multisets (with replacement), returned alongside the loss.
pub fn pde_minibatch_loss(
    params: &KanParams,
    problem: &PdeProblem,
    batch: &PinnBatchConfig,
    rng: &mut Stream,
) -> Result<(f64, Batch)> {
    let objective = problem.objective()?;
    let indices = vec![sample_batch(problem.n1(), batch.b1, rng), sample_batch(problem.n2(), batch.b2, rng)];
    let b = Batch { indices };
    let raw = objective.raw_residuals(params)?;
    Ok((objective.batch_loss_from_raw(&raw, &b)?, b))
}

fn heat_exact() -> AnalyticFunction {
    use std::f64::consts::PI;
    AnalyticFunction::new(
        2,
        Arc::new(|x| {
            let (t, xi) = (x[0], x[1]);
            let e = (-t).exp();
            let (s, c) = (PI * xi).sin_cos();
            let u = e * s;
            (u, vec![-u, PI * e * c], vec![u, -PI * e * c, -PI * e * c, -PI * PI * u])
        }),
    )
}

fn advection_exact() -> AnalyticFunction {
    use std::f64::consts::PI;
    AnalyticFunction::new(
        2,
        Arc::new(|x| {
            let w = PI * (x[1] - x[0]);
            let (s, c) = w.sin_cos();
            let pp = -PI * PI * s;
            (s, vec![-PI * c, PI * c], vec![pp, -pp, -pp, pp])
        }),
    )
}

/// Manufactured problems on `[0,1]^2` with coordinates `(t, xi)`:
///
/// - `heat1d`: `u = exp(-t) sin(pi xi)`, `h_22 = 1/pi^2`, `v = 0`;
/// - `advection1d`: `u = sin(pi (xi - t))`, `g_2 = -1`, `v = 0`.
///
/// Interior points are uniform in the open square. Boundary points cycle over
/// the faces `t = 0`, `xi = 0` and `xi = 1`, uniform along each face.
pub fn make_manufactured_problem(kind: ProblemKind, n1: usize, n2: usize, seed: u64) -> Result<PdeProblem> {
    use std::f64::consts::PI;
    let (pde, exact) = match kind {
        ProblemKind::Heat1d => (
            LinearPde::new(
                2,
                Arc::new(|_| vec![0.0, 0.0, 0.0, 1.0 / (PI * PI)]),
                Arc::new(|_| vec![0.0, 0.0]),
                Arc::new(|_| 0.0),
            )?,
            heat_exact(),
        ),
        ProblemKind::Advection1d => (
            LinearPde::new(2, Arc::new(|_| vec![0.0; 4]), Arc::new(|_| vec![0.0, -1.0]), Arc::new(|_| 0.0))?,
            advection_exact(),
        ),
    };
    let mut rng = Stream::new(seed ^ DATA_STREAM);
    let mut open_unit = || loop {
        let u = rng.uniform();
        if u > 0.0 {
            return u;
        }
    };
    let interior: Vec<Vec<f64>> = (0..n1).map(|_| vec![open_unit(), open_unit()]).collect();
    let boundary_points: Vec<Vec<f64>> = (0..n2)
        .map(|i| {
            let s = open_unit();
            match i % 3 {
                0 => vec![0.0, s],
                1 => vec![s, 0.0],
                _ => vec![s, 1.0],
            }
        })
        .collect();
    let on_boundary = exact.clone();
    let mut problem =
        PdeProblem::new(pde, Arc::new(|_| 0.0), Arc::new(move |x| on_boundary.value(x)), interior, boundary_points)?;
    problem.exact = Some(exact);
    problem.descriptor = Some(ProblemDescriptor { kind, n1, n2, seed });
    Ok(problem)
}

pub fn problem_from_descriptor(d: &ProblemDescriptor) -> Result<PdeProblem> {
    make_manufactured_problem(d.kind, d.n1, d.n2, d.seed)
}

/// `max |f - u|` over the `k x k` grid `{i/(k-1)}^2` of the unit square.
pub fn grid_max_error(params: &KanParams, exact: &AnalyticFunction, k: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let denom = (k.max(2) - 1) as f64;
    for i in 0..k {
        for j in 0..k {
            let x = [i as f64 / denom, j as f64 / denom];
            worst = worst.max((predict(params, &x)? - exact.value(&x)).abs());
        }
    }
    Ok(worst)
}
