//! The two-layer KAN
//!
//! ```text
//! f(x; a, c) = m^{-1/2} sum_q sum_k c_{q,k} b_k(phi(z_q)),   z_q = sum_{p,k1} a_{p,q,k1} b_{k1}(x_p)
//! ```
//!
//! together with its exact parameter gradients, input gradient and Hessian,
//! and the parameter gradient of a linear second-order operator applied to
//! `f`. Summation order is fixed everywhere: the inner sum runs over `(p, k)`
//! row-major, the outer sum over `q` ascending. Batched kernels parallelise
//! over terms (values) or hidden units (gradients), never splitting a single
//! reduction, so results are bit-reproducible regardless of thread count.

#![allow(clippy::needless_range_loop)]

use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, TransformSpec};
use crate::error::{KanError, Result};
use crate::rng::{Stream, INIT_STREAM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KanShape {
    /// Input dimension.
    pub n: usize,
    /// Hidden width.
    pub m: usize,
    /// Basis count shared by both layers.
    pub n_d: usize,
    pub inner_basis: BasisSpec,
    pub outer_basis: BasisSpec,
    pub transform: TransformSpec,
}

impl KanShape {
    pub fn new(
        n: usize,
        m: usize,
        inner_basis: BasisSpec,
        outer_basis: BasisSpec,
        transform: TransformSpec,
    ) -> Result<Self> {
        let shape = KanShape { n, m, n_d: inner_basis.count(), inner_basis, outer_basis, transform };
        shape.validate()?;
        Ok(shape)
    }

    /// Same family on both layers.
    pub fn uniform(n: usize, m: usize, basis: BasisSpec, transform: TransformSpec) -> Result<Self> {
        Self::new(n, m, basis.clone(), basis, transform)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.n_d == 0 {
            return Err(KanError::InvalidShape(format!(
                "n, m and n_d must be positive (n={}, m={}, n_d={})",
                self.n, self.m, self.n_d
            )));
        }
        self.inner_basis.validate()?;
        self.outer_basis.validate()?;
        if self.inner_basis.count() != self.n_d || self.outer_basis.count() != self.n_d {
            return Err(KanError::InvalidShape(format!(
                "both layers must use n_d={} basis functions (inner {}, outer {})",
                self.n_d,
                self.inner_basis.count(),
                self.outer_basis.count()
            )));
        }
        Ok(())
    }

    pub fn with_width(&self, m: usize) -> Self {
        KanShape { m, ..self.clone() }
    }

    pub fn num_a(&self) -> usize {
        self.m * self.n * self.n_d
    }

    pub fn num_c(&self) -> usize {
        self.m * self.n_d
    }

    pub fn num_params(&self) -> usize {
        self.num_a() + self.num_c()
    }

    /// Flat index of `a_{p,q,k}` (storage is `m x n x n_d` row-major).
    pub fn a_index(&self, p: usize, q: usize, k: usize) -> usize {
        (q * self.n + p) * self.n_d + k
    }

    pub fn c_index(&self, q: usize, k: usize) -> usize {
        q * self.n_d + k
    }

    fn scale(&self) -> f64 {
        1.0 / (self.m as f64).sqrt()
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Trainable tensors `a` (m x n x n_d) and `c` (m x n_d).
///
/// Every mutation stamps a new version so that a [`ForwardCache`] built from
/// older values is rejected.
#[derive(Debug, Clone)]
pub struct KanParams {
    shape: KanShape,
    a: Vec<f64>,
    c: Vec<f64>,
    version: u64,
}

impl PartialEq for KanParams {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.a == other.a && self.c == other.c
    }
}

impl KanParams {
    pub fn from_parts(shape: KanShape, a: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if a.len() != shape.num_a() {
            return Err(KanError::DimensionMismatch { expected: shape.num_a(), got: a.len() });
        }
        if c.len() != shape.num_c() {
            return Err(KanError::DimensionMismatch { expected: shape.num_c(), got: c.len() });
        }
        if let Some(v) = a.iter().chain(&c).find(|v| !v.is_finite()) {
            return Err(KanError::NonFinite(*v));
        }
        Ok(KanParams { shape, a, c, version: fresh_version() })
    }

    pub fn zeros(shape: KanShape) -> Result<Self> {
        let (na, nc) = (shape.num_a(), shape.num_c());
        Self::from_parts(shape, vec![0.0; na], vec![0.0; nc])
    }

    pub fn shape(&self) -> &KanShape {
        &self.shape
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to `a`; bumps the version.
    pub fn a_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.a
    }

    /// Mutable access to `c`; bumps the version.
    pub fn c_mut(&mut self) -> &mut [f64] {
        self.version = fresh_version();
        &mut self.c
    }

    /// `theta <- theta - eta * grad`, one fused pass per block.
    pub fn descend(&mut self, eta: f64, grad: &ParamGrad) {
        self.version = fresh_version();
        for (p, g) in self.a.iter_mut().zip(&grad.a) {
            *p -= eta * g;
        }
        for (p, g) in self.c.iter_mut().zip(&grad.c) {
            *p -= eta * g;
        }
    }

    /// `c_q` as a slice.
    pub fn c_unit(&self, q: usize) -> &[f64] {
        &self.c[q * self.shape.n_d..(q + 1) * self.shape.n_d]
    }

    /// Flat snapshot: all of `a` row-major, then all of `c` row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.a.len() + self.c.len());
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.c);
        v
    }

    pub fn from_flat(shape: KanShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.num_params() {
            return Err(KanError::DimensionMismatch { expected: shape.num_params(), got: flat.len() });
        }
        let split = shape.num_a();
        Self::from_parts(shape, flat[..split].to_vec(), flat[split..].to_vec())
    }

    /// Text checkpoint: one value per line in [`Self::to_flat`] order,
    /// printed with round-trip precision.
    pub fn write_text<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for v in self.a.iter().chain(&self.c) {
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(shape: KanShape, r: R) -> Result<Self> {
        let mut flat = Vec::with_capacity(shape.num_params());
        for line in r.lines() {
            let line = line.map_err(|e| KanError::InvalidData(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            flat.push(line.parse::<f64>().map_err(|e| KanError::InvalidData(format!("{line}: {e}")))?);
        }
        Self::from_flat(shape, &flat)
    }
}

/// NTK initialization: every `a_{p,q,k}` then every `c_{q,k}` drawn i.i.d.
/// standard normal from the init stream of `seed`.
pub fn init_params(shape: &KanShape, seed: u64) -> Result<KanParams> {
    shape.validate()?;
    let mut rng = Stream::new(seed ^ INIT_STREAM);
    let a = (0..shape.num_a()).map(|_| rng.normal()).collect();
    let c = (0..shape.num_c()).map(|_| rng.normal()).collect();
    KanParams::from_parts(shape.clone(), a, c)
}

/// Training samples `{(x_i, y_i)}`, `X` stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    n: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(n: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(KanError::InvalidData("input dimension must be positive".into()));
        }
        if y.is_empty() {
            return Err(KanError::InvalidData("dataset must contain at least one sample".into()));
        }
        if x.len() != n * y.len() {
            return Err(KanError::InvalidData(format!("X has {} entries, expected {} x {}", x.len(), y.len(), n)));
        }
        if let Some(v) = x.iter().chain(&y).find(|v| !v.is_finite()) {
            return Err(KanError::NonFinite(*v));
        }
        Ok(Dataset { n, x, y })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(KanError::InvalidData("rows have differing lengths".into()));
        }
        Self::new(n, rows.concat(), y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n..(i + 1) * self.n]
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn with_targets(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.n, self.x.clone(), y)
    }
}

/// Gradient with respect to `(a, c)`, same layout as [`KanParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros(shape: &KanShape) -> Self {
        ParamGrad { a: vec![0.0; shape.num_a()], c: vec![0.0; shape.num_c()] }
    }

    pub fn dot(&self, other: &ParamGrad) -> f64 {
        let sa: f64 = self.a.iter().zip(&other.a).map(|(x, y)| x * y).sum();
        let sc: f64 = self.c.iter().zip(&other.c).map(|(x, y)| x * y).sum();
        sa + sc
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.a.clone();
        v.extend_from_slice(&self.c);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.c).all(|v| v.is_finite())
    }
}

/// Memoized hidden-layer quantities for one `(params, x)` pair.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    x: Vec<f64>,
    /// Pre-activations `z_q`.
    pub z: Vec<f64>,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub d2phi: Vec<f64>,
    /// Per-unit outer sums `sum_k c_{q,k} b_k(phi(z_q))`.
    pub unit_out: Vec<f64>,
}

impl ForwardCache {
    pub fn version(&self) -> u64 {
        self.version
    }
}

/// Coefficients of the pointwise linear operator
/// `L[u](x) = zeroth * u + sum_p first_p du/dx_p + sum_{p,p'} second_{p,p'} d2u/dx_p dx_p'`.
///
/// `second` is `n x n` row-major and symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorCoefficients {
    pub zeroth: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl OperatorCoefficients {
    pub fn zeros(n: usize) -> Self {
        OperatorCoefficients { zeroth: 0.0, first: vec![0.0; n], second: vec![0.0; n * n] }
    }

    /// Point evaluation `u(x)`.
    pub fn identity(n: usize) -> Self {
        OperatorCoefficients { zeroth: 1.0, ..Self::zeros(n) }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    /// Applies the operator to a value/gradient/Hessian triple.
    pub fn apply(&self, value: f64, gradient: &[f64], hessian: &[f64]) -> f64 {
        let mut acc = self.zeroth * value;
        for (w, g) in self.first.iter().zip(gradient) {
            acc += w * g;
        }
        for (h, d) in self.second.iter().zip(hessian) {
            acc += h * d;
        }
        acc
    }

    fn has_second_order(&self) -> bool {
        self.second.iter().any(|&h| h != 0.0)
    }
}

/// What a residual term measures at its point.
#[derive(Debug, Clone, PartialEq)]
pub enum TermOperator {
    /// `f(x)`.
    Value,
    /// A linear second-order operator applied to `f` at `x`.
    Linear(OperatorCoefficients),
}

/// One residual `Op[f](x) - target`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTerm {
    pub x: Vec<f64>,
    pub op: TermOperator,
    pub target: f64,
}

impl ResidualTerm {
    pub fn value(x: Vec<f64>, target: f64) -> Self {
        ResidualTerm { x, op: TermOperator::Value, target }
    }

    pub fn linear(x: Vec<f64>, coefficients: OperatorCoefficients, target: f64) -> Self {
        ResidualTerm { x, op: TermOperator::Linear(coefficients), target }
    }

    fn needs_input_derivatives(&self) -> bool {
        matches!(self.op, TermOperator::Linear(_))
    }
}

/// Value, input gradient and (optionally) Hessian of `f` at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDerivatives {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// `n x n` row-major; present when requested with order 2.
    pub hessian: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// kernels

/// Inner-basis values at a point: `vals[(p * (order+1) + r) * n_d + k] = b_k^{(r)}(x_p)`.
struct InnerFeatures {
    order: usize,
    vals: Vec<f64>,
}

impl InnerFeatures {
    fn new(shape: &KanShape, x: &[f64], order: usize) -> Self {
        let stride = (order + 1) * shape.n_d;
        let mut vals = vec![0.0; shape.n * stride];
        for (p, &xp) in x.iter().enumerate() {
            shape.inner_basis.eval_into(xp, order, &mut vals[p * stride..(p + 1) * stride]);
        }
        InnerFeatures { order, vals }
    }

    #[inline]
    fn row(&self, n_d: usize, p: usize, r: usize) -> &[f64] {
        let start = (p * (self.order + 1) + r) * n_d;
        &self.vals[start..start + n_d]
    }
}

fn check_input(shape: &KanShape, x: &[f64]) -> Result<()> {
    if x.len() != shape.n {
        return Err(KanError::DimensionMismatch { expected: shape.n, got: x.len() });
    }
    if let Some(v) = x.iter().find(|v| !v.is_finite()) {
        return Err(KanError::NonFinite(*v));
    }
    Ok(())
}

/// `z_q`, summed over `(p, k)` row-major.
#[inline]
fn pre_activation(n: usize, n_d: usize, a_q: &[f64], feats: &InnerFeatures) -> f64 {
    let mut z = 0.0;
    for p in 0..n {
        let u = feats.row(n_d, p, 0);
        let a_qp = &a_q[p * n_d..(p + 1) * n_d];
        for k in 0..n_d {
            z += a_qp[k] * u[k];
        }
    }
    z
}

/// Per-unit outer jet: `phi` derivatives, outer basis derivatives at `phi(z)`
/// (left in `outer`), and `g^{(r)}(z)` for `g(z) = sum_k c_k b_k(phi(z))`.
struct OuterJet {
    phi: [f64; 4],
    g: [f64; 4],
}

#[inline]
fn outer_jet(shape: &KanShape, c_q: &[f64], z: f64, order: usize, outer: &mut [f64]) -> OuterJet {
    let n_d = shape.n_d;
    let phi = shape.transform.derivatives(z);
    shape.outer_basis.eval_into(phi[0], order, outer);
    let mut gy = [0.0; 4];
    for (r, g) in gy.iter_mut().enumerate().take(order + 1) {
        let row = &outer[r * n_d..(r + 1) * n_d];
        let mut acc = 0.0;
        for k in 0..n_d {
            acc += c_q[k] * row[k];
        }
        *g = acc;
    }
    let (p1, p2, p3) = (phi[1], phi[2], phi[3]);
    let g =
        [gy[0], gy[1] * p1, gy[2] * p1 * p1 + gy[1] * p2, gy[3] * p1 * p1 * p1 + 3.0 * gy[2] * p1 * p2 + gy[1] * p3];
    OuterJet { phi, g }
}

/// Scratch buffers reused across units within one worker.
struct Scratch {
    outer: Vec<f64>,
    dz: Vec<f64>,
    d2z: Vec<f64>,
    hdz: Vec<f64>,
}

impl Scratch {
    fn new(shape: &KanShape) -> Self {
        Scratch {
            outer: vec![0.0; 4 * shape.n_d],
            dz: vec![0.0; shape.n],
            d2z: vec![0.0; shape.n],
            hdz: vec![0.0; shape.n],
        }
    }
}

/// `dz_q/dx_p` and the diagonal `d2z_q/dx_p^2` (z is additively separable in x).
#[inline]
fn input_jet(n: usize, n_d: usize, a_q: &[f64], feats: &InnerFeatures, dz: &mut [f64], d2z: &mut [f64]) {
    for p in 0..n {
        let a_qp = &a_q[p * n_d..(p + 1) * n_d];
        let u1 = feats.row(n_d, p, 1);
        let u2 = feats.row(n_d, p, 2);
        let (mut s1, mut s2) = (0.0, 0.0);
        for k in 0..n_d {
            s1 += a_qp[k] * u1[k];
            s2 += a_qp[k] * u2[k];
        }
        dz[p] = s1;
        d2z[p] = s2;
    }
}

/// Adds `coeff * d(Op[f](x))/d(a_q, c_q)` into the unit's gradient slices.
#[allow(clippy::too_many_arguments)]
fn accumulate_unit_gradient(
    shape: &KanShape,
    a_q: &[f64],
    c_q: &[f64],
    term: &ResidualTerm,
    feats: &InnerFeatures,
    coeff: f64,
    ga: &mut [f64],
    gc: &mut [f64],
    scratch: &mut Scratch,
) {
    let (n, n_d) = (shape.n, shape.n_d);
    let s = shape.scale();
    let z = pre_activation(n, n_d, a_q, feats);
    match &term.op {
        TermOperator::Value => {
            let jet = outer_jet(shape, c_q, z, 1, &mut scratch.outer);
            let w = jet.g[1];
            for k in 0..n_d {
                gc[k] += coeff * (s * scratch.outer[k]);
            }
            for p in 0..n {
                let u = feats.row(n_d, p, 0);
                for k in 0..n_d {
                    ga[p * n_d + k] += coeff * (s * (w * u[k]));
                }
            }
        }
        TermOperator::Linear(op) => {
            let jet = outer_jet(shape, c_q, z, 3, &mut scratch.outer);
            input_jet(n, n_d, a_q, feats, &mut scratch.dz, &mut scratch.d2z);
            let (dz, d2z, hdz) = (&scratch.dz, &scratch.d2z, &mut scratch.hdz);
            // A = sum_p w_p dz_p + sum_p H_pp d2z_p,  B = dz^T H dz,  hdz = H dz
            let mut lin = 0.0;
            for p in 0..n {
                lin += op.first[p] * dz[p] + op.second[p * n + p] * d2z[p];
            }
            let mut quad = 0.0;
            for p in 0..n {
                let mut acc = 0.0;
                for pp in 0..n {
                    acc += op.second[p * n + pp] * dz[pp];
                }
                hdz[p] = acc;
                quad += dz[p] * acc;
            }
            let [_, p1, p2, _] = jet.phi;
            let [_, g1, g2, g3] = jet.g;
            let outer = &scratch.outer;
            for k in 0..n_d {
                let v0 = outer[k];
                let v1 = outer[n_d + k];
                let v2 = outer[2 * n_d + k];
                let d = op.zeroth * v0 + lin * (v1 * p1) + quad * (v2 * p1 * p1 + v1 * p2);
                gc[k] += coeff * (s * d);
            }
            let t1 = op.zeroth * g1 + lin * g2 + quad * g3;
            for p in 0..n {
                let u0 = feats.row(n_d, p, 0);
                let u1 = feats.row(n_d, p, 1);
                let u2 = feats.row(n_d, p, 2);
                let wp = op.first[p];
                let hpp = op.second[p * n + p];
                let cross = 2.0 * g2 * hdz[p];
                for k in 0..n_d {
                    let d = t1 * u0[k] + g1 * (wp * u1[k] + hpp * u2[k]) + cross * u1[k];
                    ga[p * n_d + k] += coeff * (s * d);
                }
            }
        }
    }
}

fn input_derivatives_unchecked(params: &KanParams, feats: &InnerFeatures, max_order: usize) -> InputDerivatives {
    let shape = &params.shape;
    let (n, n_d, m) = (shape.n, shape.n_d, shape.m);
    let mut scratch = Scratch::new(shape);
    let mut value = 0.0;
    let mut gradient = vec![0.0; n];
    let mut hessian = if max_order >= 2 { Some(vec![0.0; n * n]) } else { None };
    for q in 0..m {
        let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
        let c_q = &params.c[q * n_d..(q + 1) * n_d];
        let z = pre_activation(n, n_d, a_q, feats);
        let jet = outer_jet(shape, c_q, z, max_order, &mut scratch.outer);
        input_jet(n, n_d, a_q, feats, &mut scratch.dz, &mut scratch.d2z);
        value += jet.g[0];
        for p in 0..n {
            gradient[p] += jet.g[1] * scratch.dz[p];
        }
        if let Some(h) = hessian.as_mut() {
            for p in 0..n {
                for pp in 0..n {
                    let mut v = jet.g[2] * scratch.dz[p] * scratch.dz[pp];
                    if p == pp {
                        v += jet.g[1] * scratch.d2z[p];
                    }
                    h[p * n + pp] += v;
                }
            }
        }
    }
    let s = shape.scale();
    InputDerivatives {
        value: s * value,
        gradient: gradient.into_iter().map(|g| s * g).collect(),
        hessian: hessian.map(|h| h.into_iter().map(|v| s * v).collect()),
    }
}

fn forward_value(params: &KanParams, feats: &InnerFeatures) -> f64 {
    let shape = &params.shape;
    let (n, n_d) = (shape.n, shape.n_d);
    let mut outer = vec![0.0; n_d];
    let mut total = 0.0;
    for q in 0..shape.m {
        let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
        let c_q = &params.c[q * n_d..(q + 1) * n_d];
        let z = pre_activation(n, n_d, a_q, feats);
        total += outer_jet(shape, c_q, z, 0, &mut outer).g[0];
    }
    shape.scale() * total
}

fn term_features(shape: &KanShape, term: &ResidualTerm) -> InnerFeatures {
    let order = if term.needs_input_derivatives() { 2 } else { 0 };
    InnerFeatures::new(shape, &term.x, order)
}

fn check_term(shape: &KanShape, term: &ResidualTerm) -> Result<()> {
    check_input(shape, &term.x)?;
    if let TermOperator::Linear(op) = &term.op {
        if op.dim() != shape.n || op.second.len() != shape.n * shape.n {
            return Err(KanError::DimensionMismatch { expected: shape.n, got: op.dim() });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// public operations

/// `f(x; a, c)` plus the hidden-layer cache.
pub fn forward(params: &KanParams, x: &[f64]) -> Result<(f64, ForwardCache)> {
    let shape = &params.shape;
    check_input(shape, x)?;
    let (n, n_d, m) = (shape.n, shape.n_d, shape.m);
    let feats = InnerFeatures::new(shape, x, 0);
    let mut outer = vec![0.0; 4 * n_d];
    let mut cache = ForwardCache {
        version: params.version,
        x: x.to_vec(),
        z: Vec::with_capacity(m),
        phi: Vec::with_capacity(m),
        dphi: Vec::with_capacity(m),
        d2phi: Vec::with_capacity(m),
        unit_out: Vec::with_capacity(m),
    };
    let mut total = 0.0;
    for q in 0..m {
        let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
        let c_q = &params.c[q * n_d..(q + 1) * n_d];
        let z = pre_activation(n, n_d, a_q, &feats);
        let jet = outer_jet(shape, c_q, z, 0, &mut outer);
        total += jet.g[0];
        cache.z.push(z);
        cache.phi.push(jet.phi[0]);
        cache.dphi.push(jet.phi[1]);
        cache.d2phi.push(jet.phi[2]);
        cache.unit_out.push(jet.g[0]);
    }
    Ok((shape.scale() * total, cache))
}

/// `f(x)` without building a cache.
pub fn predict(params: &KanParams, x: &[f64]) -> Result<f64> {
    check_input(&params.shape, x)?;
    Ok(forward_value(params, &InnerFeatures::new(&params.shape, x, 0)))
}

/// Normalized residuals `s_i = (f(x_i) - y_i) / sqrt(N)`.
pub fn residuals(params: &KanParams, data: &Dataset) -> Result<Vec<f64>> {
    if data.dim() != params.shape.n {
        return Err(KanError::DimensionMismatch { expected: params.shape.n, got: data.dim() });
    }
    let root_n = (data.len() as f64).sqrt();
    let preds = predict_batch(params, (0..data.len()).map(|i| data.row(i)).collect::<Vec<_>>().as_slice())?;
    Ok(preds.iter().zip(data.targets()).map(|(f, y)| (f - y) / root_n).collect())
}

/// Predictions at many points, parallel over points.
pub fn predict_batch(params: &KanParams, xs: &[&[f64]]) -> Result<Vec<f64>> {
    for x in xs {
        check_input(&params.shape, x)?;
    }
    Ok(xs.par_iter().map(|x| forward_value(params, &InnerFeatures::new(&params.shape, x, 0))).collect())
}

/// `(df/da, df/dc)` at the point that produced `cache`.
pub fn param_grad(params: &KanParams, x: &[f64], cache: &ForwardCache) -> Result<ParamGrad> {
    if cache.version != params.version {
        return Err(KanError::StaleCache { cache: cache.version, params: params.version });
    }
    if cache.x.as_slice() != x {
        return Err(KanError::StaleCache { cache: cache.version, params: params.version });
    }
    Ok(term_gradient_unchecked(params, &ResidualTerm::value(x.to_vec(), 0.0)))
}

/// Exact input gradient and, for `max_order == 2`, Hessian of `f`.
pub fn input_derivatives(params: &KanParams, x: &[f64], max_order: usize) -> Result<InputDerivatives> {
    check_input(&params.shape, x)?;
    if !(1..=2).contains(&max_order) {
        return Err(KanError::UnsupportedOrder(max_order));
    }
    let feats = InnerFeatures::new(&params.shape, x, 2);
    Ok(input_derivatives_unchecked(params, &feats, max_order))
}

/// `Op[f](x)` for a linear operator, via [`input_derivatives`].
pub fn operator_value(params: &KanParams, x: &[f64], op: &OperatorCoefficients) -> Result<f64> {
    check_term(&params.shape, &ResidualTerm::linear(x.to_vec(), op.clone(), 0.0))?;
    let feats = InnerFeatures::new(&params.shape, x, 2);
    let order = if op.has_second_order() { 2 } else { 1 };
    let d = input_derivatives_unchecked(params, &feats, order);
    let zero_hessian;
    let hessian = match &d.hessian {
        Some(h) => h.as_slice(),
        None => {
            zero_hessian = vec![0.0; params.shape.n * params.shape.n];
            &zero_hessian
        }
    };
    Ok(op.apply(d.value, &d.gradient, hessian))
}

/// Parameter gradient of `Op[f](x)` for a linear second-order operator.
pub fn param_grad_of_operator(params: &KanParams, x: &[f64], op: &OperatorCoefficients) -> Result<ParamGrad> {
    let term = ResidualTerm::linear(x.to_vec(), op.clone(), 0.0);
    check_term(&params.shape, &term)?;
    Ok(term_gradient_unchecked(params, &term))
}

/// `Op[f](x)` for one residual term (the target is not subtracted).
pub fn evaluate_term(params: &KanParams, term: &ResidualTerm) -> Result<f64> {
    check_term(&params.shape, term)?;
    match &term.op {
        TermOperator::Value => predict(params, &term.x),
        TermOperator::Linear(op) => operator_value(params, &term.x, op),
    }
}

/// `Op[f]` for every term, parallel over terms.
pub fn evaluate_terms(params: &KanParams, terms: &[ResidualTerm]) -> Result<Vec<f64>> {
    terms.par_iter().map(|t| evaluate_term(params, t)).collect()
}

/// Parameter gradient of `Op[f](x)` for one term.
pub fn term_gradient(params: &KanParams, term: &ResidualTerm) -> Result<ParamGrad> {
    check_term(&params.shape, term)?;
    Ok(term_gradient_unchecked(params, term))
}

fn term_gradient_unchecked(params: &KanParams, term: &ResidualTerm) -> ParamGrad {
    let shape = &params.shape;
    let (n, n_d) = (shape.n, shape.n_d);
    let feats = term_features(shape, term);
    let mut grad = ParamGrad::zeros(shape);
    let mut scratch = Scratch::new(shape);
    for (q, (ga, gc)) in grad.a.chunks_mut(n * n_d).zip(grad.c.chunks_mut(n_d)).enumerate() {
        let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
        let c_q = &params.c[q * n_d..(q + 1) * n_d];
        accumulate_unit_gradient(shape, a_q, c_q, term, &feats, 1.0, ga, gc, &mut scratch);
    }
    grad
}

/// `sum_j coeffs[j] * d(Op_j[f](x_j))/dtheta`, parallel over hidden units.
///
/// Each gradient entry is reduced over `j` in order by a single worker.
pub fn weighted_gradient(params: &KanParams, terms: &[&ResidualTerm], coeffs: &[f64]) -> Result<ParamGrad> {
    let shape = &params.shape;
    if terms.len() != coeffs.len() {
        return Err(KanError::DimensionMismatch { expected: terms.len(), got: coeffs.len() });
    }
    for t in terms {
        check_term(shape, t)?;
    }
    let (n, n_d) = (shape.n, shape.n_d);
    let feats: Vec<InnerFeatures> = terms.iter().map(|t| term_features(shape, t)).collect();
    let mut grad = ParamGrad::zeros(shape);
    grad.a.par_chunks_mut(n * n_d).zip(grad.c.par_chunks_mut(n_d)).enumerate().for_each_init(
        || Scratch::new(shape),
        |scratch, (q, (ga, gc))| {
            let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
            let c_q = &params.c[q * n_d..(q + 1) * n_d];
            for ((term, f), &coeff) in terms.iter().zip(&feats).zip(coeffs) {
                accumulate_unit_gradient(shape, a_q, c_q, term, f, coeff, ga, gc, scratch);
            }
        },
    );
    Ok(grad)
}

/// Per-unit gradient blocks of one term: for each unit `q`, the slices of
/// `d(Op[f])/da_q` (length `n * n_d`) and `d(Op[f])/dc_q` (length `n_d`).
pub(crate) fn unit_gradient_blocks(params: &KanParams, term: &ResidualTerm, q: usize, ga: &mut [f64], gc: &mut [f64]) {
    let shape = &params.shape;
    let (n, n_d) = (shape.n, shape.n_d);
    ga.iter_mut().for_each(|v| *v = 0.0);
    gc.iter_mut().for_each(|v| *v = 0.0);
    let feats = term_features(shape, term);
    let mut scratch = Scratch::new(shape);
    let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
    let c_q = &params.c[q * n_d..(q + 1) * n_d];
    accumulate_unit_gradient(shape, a_q, c_q, term, &feats, 1.0, ga, gc, &mut scratch);
}

/// Per-unit quantities used by the closed-form regression Gram entries:
/// returns `(w_q, [b_k(phi(z_q))]_k)` with `w_q = sum_k c_{q,k} b_k'(phi(z_q)) phi'(z_q)`.
pub(crate) fn unit_outer_features(params: &KanParams, x: &[f64], q: usize, outer: &mut [f64]) -> f64 {
    let shape = &params.shape;
    let (n, n_d) = (shape.n, shape.n_d);
    let feats = InnerFeatures::new(shape, x, 0);
    let a_q = &params.a[q * n * n_d..(q + 1) * n * n_d];
    let c_q = &params.c[q * n_d..(q + 1) * n_d];
    let z = pre_activation(n, n_d, a_q, &feats);
    let mut buf = vec![0.0; 2 * n_d];
    let jet = outer_jet(shape, c_q, z, 1, &mut buf);
    outer[..n_d].copy_from_slice(&buf[..n_d]);
    jet.g[1]
}
