//! Neural-tangent-kernel Gram matrices `G = D^T D`.
//!
//! Column `i` of `D` is the parameter gradient of the normalized residual
//! `s_i`. Three assembly routes are provided and cross-checked in tests:
//! explicit columns ([`assemble_d`] + [`gram`]), the factorized regression
//! entries `S_ij + Q_ij` ([`gram_closed_form`]), and per-unit blocked inner
//! products ([`gram_blocked`]), which also covers operator residuals.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::model::{
    init_params, term_gradient, unit_gradient_blocks, unit_outer_features, Dataset, KanParams, KanShape,
};
use crate::objective::Objective;

/// `P x N` derivative matrix stored by column.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivMatrix {
    rows: usize,
    columns: Vec<Vec<f64>>,
}

impl DerivMatrix {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(KanError::InvalidData("columns of D must share one length".into()));
        }
        Ok(DerivMatrix { rows, columns })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    /// `D^T v` for a parameter-space vector `v`.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, v)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Symmetric Gram matrix with its sorted spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub n: usize,
    /// Row-major `n x n`.
    pub matrix: Vec<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

/// Spectrum-only view for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub n: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub eigenvalues: Vec<f64>,
}

impl GramReport {
    pub fn from_matrix(n: usize, matrix: Vec<f64>) -> Result<Self> {
        let eigenvalues = sym_eig(n, &matrix)?;
        let sigma_min = eigenvalues.first().copied().unwrap_or(0.0);
        let sigma_max = eigenvalues.last().copied().unwrap_or(0.0);
        Ok(GramReport { n, matrix, eigenvalues, sigma_min, sigma_max })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.n + j]
    }

    pub fn summary(&self) -> SpectrumSummary {
        SpectrumSummary {
            n: self.n,
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            eigenvalues: self.eigenvalues.clone(),
        }
    }

    /// Matrix as CSV under a `# schema=1` comment line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema=1")?;
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| format!("{:e}", self.get(i, j))).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Stacked `(ds/da, ds/dc)` column for every residual of `objective`.
pub fn assemble_d_objective(params: &KanParams, objective: &Objective) -> Result<DerivMatrix> {
    let scales = objective.term_scales();
    let columns = objective
        .terms()
        .par_iter()
        .zip(scales.par_iter())
        .map(|(term, &scale)| {
            let g = term_gradient(params, term)?;
            Ok(g.to_flat().into_iter().map(|v| scale * v).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    DerivMatrix::from_columns(columns)
}

/// Regression `D`: column `i` is `param_grad(x_i) / sqrt(N)`.
pub fn assemble_d(params: &KanParams, data: &Dataset) -> Result<DerivMatrix> {
    if data.dim() != params.shape().n {
        return Err(KanError::DimensionMismatch { expected: params.shape().n, got: data.dim() });
    }
    assemble_d_objective(params, &Objective::regression(data))
}

/// `G = D^T D`, upper triangle accumulated then mirrored.
pub fn gram(d: &DerivMatrix) -> Result<GramReport> {
    let n = d.cols();
    let mut g = vec![0.0; n * n];
    let rows: Vec<Vec<(usize, f64)>> =
        (0..n).into_par_iter().map(|i| (i..n).map(|j| (j, dot(d.column(i), d.column(j)))).collect()).collect();
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row {
            g[i * n + j] = v;
            g[j * n + i] = v;
        }
    }
    if let Some(v) = g.iter().find(|v| !v.is_finite()) {
        return Err(KanError::NonFinite(*v));
    }
    GramReport::from_matrix(n, g)
}

/// Regression Gram entries `G_ij = S_ij + Q_ij` without forming `D`:
///
/// `S_ij = (1/(mN)) sum_q w_iq w_jq sum_{p,k} b_k(x_ip) b_k(x_jp)`,
/// `Q_ij = (1/(mN)) sum_q sum_k b_k(phi(z_iq)) b_k(phi(z_jq))`,
///
/// with `w_iq = sum_k c_{q,k} (b_k' o phi * phi')(z_iq)`.
pub fn gram_closed_form(params: &KanParams, data: &Dataset) -> Result<GramReport> {
    GramReport::from_matrix(data.len(), gram_closed_form_matrix(params, data)?)
}

fn gram_closed_form_matrix(params: &KanParams, data: &Dataset) -> Result<Vec<f64>> {
    let shape = params.shape();
    if data.dim() != shape.n {
        return Err(KanError::DimensionMismatch { expected: shape.n, got: data.dim() });
    }
    let (n_samples, n, n_d, m) = (data.len(), shape.n, shape.n_d, shape.m);
    // input kernel K_ij = sum_{p,k} b_k(x_ip) b_k(x_jp)
    let inner: Vec<Vec<f64>> = (0..n_samples)
        .map(|i| {
            let mut v = vec![0.0; n * n_d];
            for p in 0..n {
                shape.inner_basis.eval_into(data.row(i)[p], 0, &mut v[p * n_d..(p + 1) * n_d]);
            }
            v
        })
        .collect();
    let kernel: Vec<f64> =
        (0..n_samples * n_samples).map(|ij| dot(&inner[ij / n_samples], &inner[ij % n_samples])).collect();

    // per-unit features, chunked over units; partial sums merged in chunk order
    const CHUNK: usize = 64;
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut s_acc = vec![0.0; n_samples * n_samples];
            let mut q_acc = vec![0.0; n_samples * n_samples];
            let mut w = vec![0.0; n_samples];
            let mut outer = vec![0.0; n_samples * n_d];
            for q in chunk * CHUNK..((chunk + 1) * CHUNK).min(m) {
                for i in 0..n_samples {
                    w[i] = unit_outer_features(params, data.row(i), q, &mut outer[i * n_d..(i + 1) * n_d]);
                }
                for i in 0..n_samples {
                    for j in i..n_samples {
                        s_acc[i * n_samples + j] += w[i] * w[j];
                        q_acc[i * n_samples + j] += dot(&outer[i * n_d..(i + 1) * n_d], &outer[j * n_d..(j + 1) * n_d]);
                    }
                }
            }
            (s_acc, q_acc)
        })
        .collect();
    let mut s_sum = vec![0.0; n_samples * n_samples];
    let mut q_sum = vec![0.0; n_samples * n_samples];
    for (s_acc, q_acc) in partials {
        for (a, b) in s_sum.iter_mut().zip(s_acc) {
            *a += b;
        }
        for (a, b) in q_sum.iter_mut().zip(q_acc) {
            *a += b;
        }
    }
    let norm = 1.0 / (m as f64 * n_samples as f64);
    let mut g = vec![0.0; n_samples * n_samples];
    for i in 0..n_samples {
        for j in i..n_samples {
            let v = norm * (s_sum[i * n_samples + j] * kernel[i * n_samples + j] + q_sum[i * n_samples + j]);
            g[i * n_samples + j] = v;
            g[j * n_samples + i] = v;
        }
    }
    if let Some(v) = g.iter().find(|v| !v.is_finite()) {
        return Err(KanError::NonFinite(*v));
    }
    Ok(g)
}

/// `G_ij = sum_q <ds_i/da_q, ds_j/da_q> + <ds_i/dc_q, ds_j/dc_q>`, accumulated
/// unit by unit without materializing `D`. Works for any objective.
pub fn gram_blocked(params: &KanParams, objective: &Objective) -> Result<GramReport> {
    let shape = params.shape();
    let (n, n_d, m) = (shape.n, shape.n_d, shape.m);
    let terms = objective.terms();
    let scales = objective.term_scales();
    let t = terms.len();
    // validate terms once through the checked path
    for term in terms {
        crate::model::evaluate_term(params, term)?;
    }
    let partials: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|q| {
            let mut blocks_a = vec![0.0; t * n * n_d];
            let mut blocks_c = vec![0.0; t * n_d];
            for (i, term) in terms.iter().enumerate() {
                unit_gradient_blocks(
                    params,
                    term,
                    q,
                    &mut blocks_a[i * n * n_d..(i + 1) * n * n_d],
                    &mut blocks_c[i * n_d..(i + 1) * n_d],
                );
            }
            let mut acc = vec![0.0; t * t];
            for i in 0..t {
                for j in i..t {
                    let sa = dot(&blocks_a[i * n * n_d..(i + 1) * n * n_d], &blocks_a[j * n * n_d..(j + 1) * n * n_d]);
                    let sc = dot(&blocks_c[i * n_d..(i + 1) * n_d], &blocks_c[j * n_d..(j + 1) * n_d]);
                    acc[i * t + j] = sa + sc;
                }
            }
            acc
        })
        .collect();
    let mut g = vec![0.0; t * t];
    for acc in partials {
        for (a, b) in g.iter_mut().zip(acc) {
            *a += b;
        }
    }
    for i in 0..t {
        for j in i..t {
            let v = scales[i] * scales[j] * g[i * t + j];
            g[i * t + j] = v;
            g[j * t + i] = v;
        }
    }
    GramReport::from_matrix(t, g)
}

/// Eigenvalues (ascending) of the symmetrized `(M + M^T)/2` by cyclic Jacobi
/// rotations. Sweeps until the off-diagonal Frobenius norm is at most
/// `1e-14 * ||M||_F`.
pub fn sym_eig(n: usize, matrix: &[f64]) -> Result<Vec<f64>> {
    if matrix.len() != n * n {
        return Err(KanError::DimensionMismatch { expected: n * n, got: matrix.len() });
    }
    if let Some(v) = matrix.iter().find(|v| !v.is_finite()) {
        return Err(KanError::NonFinite(*v));
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in 0..i {
            asym = asym.max((matrix[i * n + j] - matrix[j * n + i]).abs());
        }
    }
    if asym > 1e-9 {
        return Err(KanError::NotSymmetric(asym));
    }
    let mut a: Vec<f64> = (0..n * n)
        .map(|ij| {
            let (i, j) = (ij / n, ij % n);
            0.5 * (matrix[i * n + j] + matrix[j * n + i])
        })
        .collect();
    let frob = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let target = 1e-14 * frob;
    const MAX_SWEEPS: usize = 100;
    for _ in 0..MAX_SWEEPS {
        let off = off_diagonal_norm(n, &a);
        if off <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                a[p * n + p] -= t * apq;
                a[q * n + q] += t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let g = a[r * n + p];
                    let h = a[r * n + q];
                    let rp = g - s * (h + g * tau);
                    let rq = h + s * (g - h * tau);
                    a[r * n + p] = rp;
                    a[p * n + r] = rp;
                    a[r * n + q] = rq;
                    a[q * n + r] = rq;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

fn off_diagonal_norm(n: usize, a: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Monte-Carlo estimate of the expected Gram matrix over initializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GInfinityEstimate {
    pub mean: GramReport,
    /// Elementwise standard error of the mean, row-major.
    pub std_error: Vec<f64>,
    pub num_seeds: usize,
}

/// Averages the regression Gram over `num_seeds` inits with seeds
/// `base_seed, base_seed + 1, ...`.
pub fn estimate_g_infinity(
    shape: &KanShape,
    data: &Dataset,
    num_seeds: usize,
    base_seed: u64,
) -> Result<GInfinityEstimate> {
    if num_seeds == 0 {
        return Err(KanError::InvalidConfig("need at least one seed".into()));
    }
    let grams = (0..num_seeds)
        .into_par_iter()
        .map(|s| {
            let params = init_params(shape, base_seed.wrapping_add(s as u64))?;
            gram_closed_form_matrix(&params, data)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = data.len();
    let count = num_seeds as f64;
    let mut mean = vec![0.0; n * n];
    for g in &grams {
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let std_error = if num_seeds < 2 {
        vec![0.0; n * n]
    } else {
        let mut var = vec![0.0; n * n];
        for g in &grams {
            for ((v, x), m) in var.iter_mut().zip(g).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.into_iter().map(|v| (v / (count - 1.0) / count).sqrt()).collect()
    };
    Ok(GInfinityEstimate { mean: GramReport::from_matrix(n, mean)?, std_error, num_seeds })
}

/// Result of an exact row-equality scan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distinctness {
    Distinct,
    /// Zero-based index pairs `(i, j)` with `i < j` and identical rows.
    Duplicates(Vec<(usize, usize)>),
}

/// Exact (bitwise-value) comparison of every pair of rows.
pub fn distinctness_check(data: &Dataset) -> Distinctness {
    let mut dups = Vec::new();
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            if data.row(i) == data.row(j) {
                dups.push((i, j));
            }
        }
    }
    if dups.is_empty() {
        Distinctness::Distinct
    } else {
        Distinctness::Duplicates(dups)
    }
}

/// `||G_t - G_ref||_2`, the largest absolute eigenvalue of the difference.
pub fn gram_deviation(g_t: &GramReport, g_ref: &GramReport) -> Result<f64> {
    if g_t.n != g_ref.n {
        return Err(KanError::DimensionMismatch { expected: g_ref.n, got: g_t.n });
    }
    let diff: Vec<f64> = g_t.matrix.iter().zip(&g_ref.matrix).map(|(a, b)| a - b).collect();
    let eig = sym_eig(g_t.n, &diff)?;
    Ok(eig.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())))
}

/// Stability thresholds for the lazy-training diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LazyRadii {
    pub r_a: f64,
    pub r_c: f64,
    pub m_c: f64,
}

/// Measured distance from initialization.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LazyDrift {
    /// `||a(t) - a(0)||_2`.
    pub drift_a: f64,
    /// `||c(t) - c(0)||_2`.
    pub drift_c: f64,
    /// `max_q ||c_q(t)||_2`.
    pub max_cq: f64,
}

impl LazyRadii {
    /// Unbounded radii: the stopping time is never triggered.
    pub fn unbounded() -> Self {
        LazyRadii { r_a: f64::INFINITY, r_c: f64::INFINITY, m_c: f64::INFINITY }
    }

    /// `M_c = sqrt(n_d) + sqrt(ln(m / delta))` and
    /// `R_a = R_c = sigma_min sqrt(m) / (n_d^{5/2} n^{3/2} M_c^2)`.
    pub fn from_theory(shape: &KanShape, sigma_min: f64, delta: f64) -> Self {
        let (n, m, n_d) = (shape.n as f64, shape.m as f64, shape.n_d as f64);
        let m_c = n_d.sqrt() + (m / delta).ln().max(0.0).sqrt();
        let r = sigma_min.max(0.0) * m.sqrt() / (n_d.powf(2.5) * n.powf(1.5) * m_c * m_c);
        LazyRadii { r_a: r, r_c: r, m_c }
    }

    /// True when any measured quantity is beyond half its radius.
    pub fn exceeded_by(&self, drift: &LazyDrift) -> bool {
        drift.drift_a > 0.5 * self.r_a || drift.drift_c > 0.5 * self.r_c || drift.max_cq > 0.5 * self.m_c
    }
}

/// Drift of `current` relative to `init`.
pub fn measure_drift(init: &KanParams, current: &KanParams) -> LazyDrift {
    let da = init.a().iter().zip(current.a()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let dc = init.c().iter().zip(current.c()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n_d = current.shape().n_d;
    let max_cq = current.c().chunks(n_d).map(|cq| cq.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    LazyDrift { drift_a: da, drift_c: dc, max_cq }
}

/// `max_q ||c_q(t) - c_q(0)||_2`.
pub fn max_unit_c_drift(init: &KanParams, current: &KanParams) -> f64 {
    let n_d = current.shape().n_d;
    init.c()
        .chunks(n_d)
        .zip(current.c().chunks(n_d))
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisSpec, TransformSpec};
    use crate::rng::Stream;

    fn random_instance(seed: u64, m: usize, n_samples: usize) -> (KanParams, Dataset) {
        let shape = KanShape::uniform(2, m, BasisSpec::chebyshev(3), TransformSpec::Tanh).unwrap();
        let p = init_params(&shape, seed).unwrap();
        let mut rng = Stream::new(seed + 1000);
        let x = (0..2 * n_samples).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let y = (0..n_samples).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        (p, Dataset::new(2, x, y).unwrap())
    }

    #[test]
    fn eig_examples() {
        assert_eq!(sym_eig(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(), vec![1.0; 3]);
        let e = sym_eig(2, &[2.0, 1.0, 1.0, 2.0]).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-14 && (e[1] - 3.0).abs() < 1e-14);
        assert_eq!(sym_eig(3, &[5.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), vec![-2.0, 0.0, 5.0]);
    }

    #[test]
    fn eig_errors() {
        assert!(matches!(sym_eig(2, &[1.0, 2.0, 0.0, 1.0]), Err(KanError::NotSymmetric(_))));
        assert!(matches!(sym_eig(2, &[1.0, f64::NAN, f64::NAN, 1.0]), Err(KanError::NonFinite(_))));
    }

    #[test]
    fn eig_trace_and_frobenius_preserved() {
        let mut rng = Stream::new(3);
        let n = 12;
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.normal();
                m[i * n + j] = v;
                m[j * n + i] = v;
            }
        }
        let e = sym_eig(n, &m).unwrap();
        let trace: f64 = (0..n).map(|i| m[i * n + i]).sum();
        assert!((e.iter().sum::<f64>() - trace).abs() < 1e-12);
        let fro2: f64 = m.iter().map(|v| v * v).sum();
        assert!((e.iter().map(|v| v * v).sum::<f64>() - fro2).abs() < 1e-10);
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn identity_d_gives_identity_gram() {
        let d = DerivMatrix::from_columns(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let g = gram(&d).unwrap();
        assert_eq!(g.matrix, vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!((g.sigma_min, g.sigma_max), (1.0, 1.0));
    }

    #[test]
    fn zero_outer_layer_zeroes_a_block() {
        let (mut p, data) = random_instance(4, 5, 4);
        p.c_mut().iter_mut().for_each(|c| *c = 0.0);
        let d = assemble_d(&p, &data).unwrap();
        let na = p.shape().num_a();
        for j in 0..d.cols() {
            assert!(d.column(j)[..na].iter().all(|&v| v == 0.0));
        }
        // S vanishes, so G = Q
        let closed = gram_closed_form(&p, &data).unwrap();
        let from_d = gram(&d).unwrap();
        for (a, b) in closed.matrix.iter().zip(&from_d.matrix) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_sample_gram() {
        let (p, data) = random_instance(2, 6, 1);
        let d = assemble_d(&p, &data).unwrap();
        assert_eq!(d.cols(), 1);
        let g = gram(&d).unwrap();
        assert!(g.matrix[0] >= 0.0);
        let norm2: f64 = d.column(0).iter().map(|v| v * v).sum();
        assert!((g.matrix[0] - norm2).abs() <= 1e-15 * norm2.max(1.0));
    }

    #[test]
    fn duplicate_rows_give_identical_columns_and_singular_gram() {
        let shape = KanShape::uniform(2, 8, BasisSpec::chebyshev(3), TransformSpec::Tanh).unwrap();
        let p = init_params(&shape, 3).unwrap();
        let rows = vec![vec![0.1, 0.5], vec![0.3, -0.2], vec![0.1, 0.5]];
        let data = Dataset::from_rows(&rows, vec![0.0, 1.0, 2.0]).unwrap();
        let d = assemble_d(&p, &data).unwrap();
        for (a, b) in d.column(0).iter().zip(d.column(2)) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert!(gram(&d).unwrap().sigma_min <= 1e-9);
        assert_eq!(distinctness_check(&data), Distinctness::Duplicates(vec![(0, 2)]));
    }

    #[test]
    fn three_gram_routes_agree() {
        for seed in 0..10 {
            let (p, data) = random_instance(seed, 3 + seed as usize, 5);
            let a = gram(&assemble_d(&p, &data).unwrap()).unwrap();
            let b = gram_closed_form(&p, &data).unwrap();
            let c = gram_blocked(&p, &Objective::regression(&data)).unwrap();
            for ((x, y), z) in a.matrix.iter().zip(&b.matrix).zip(&c.matrix) {
                assert!((x - y).abs() <= 1e-10);
                assert!((x - z).abs() <= 1e-10);
            }
            assert!(a.eigenvalues.iter().all(|&e| e >= -1e-9));
        }
    }

    #[test]
    fn diagonal_is_squared_gradient_norm() {
        let (p, data) = random_instance(8, 7, 4);
        let g = gram_closed_form(&p, &data).unwrap();
        let d = assemble_d(&p, &data).unwrap();
        for i in 0..4 {
            let norm2: f64 = d.column(i).iter().map(|v| v * v).sum();
            assert!((g.get(i, i) - norm2).abs() <= 1e-12);
        }
    }

    #[test]
    fn distinctness_examples() {
        let d = Dataset::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(distinctness_check(&d), Distinctness::Distinct);
        let d = Dataset::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(distinctness_check(&d), Distinctness::Duplicates(vec![(0, 1)]));
        let d = Dataset::from_rows(&[vec![1e-16, 1.0], vec![0.0, 1.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(distinctness_check(&d), Distinctness::Distinct);
    }

    #[test]
    fn deviation_examples() {
        let (p, data) = random_instance(1, 4, 3);
        let g = gram_closed_form(&p, &data).unwrap();
        assert_eq!(gram_deviation(&g, &g).unwrap(), 0.0);
        let mut shifted = g.matrix.clone();
        for i in 0..3 {
            shifted[i * 3 + i] += 0.5;
        }
        let gs = GramReport::from_matrix(3, shifted).unwrap();
        assert!((gram_deviation(&gs, &g).unwrap() - 0.5).abs() < 1e-14);
        let (_, other) = random_instance(1, 4, 2);
        let g2 = gram_closed_form(&p, &other).unwrap();
        assert!(gram_deviation(&g, &g2).is_err());
    }

    #[test]
    fn single_seed_estimate_equals_gram() {
        let (p, data) = random_instance(5, 6, 4);
        let est = estimate_g_infinity(p.shape(), &data, 1, 5).unwrap();
        assert_eq!(est.mean.matrix, gram_closed_form(&p, &data).unwrap().matrix);
        assert!(est.std_error.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn radii_and_drift() {
        let shape = KanShape::uniform(2, 100, BasisSpec::chebyshev(4), TransformSpec::Tanh).unwrap();
        let r = LazyRadii::from_theory(&shape, 0.1, 0.01);
        assert!((r.m_c - (2.0 + (10_000f64).ln().sqrt())).abs() < 1e-12);
        let expected = 0.1 * 10.0 / (32.0 * 2f64.powf(1.5) * r.m_c * r.m_c);
        assert!((r.r_a - expected).abs() < 1e-15);
        let p = init_params(&shape, 0).unwrap();
        let d = measure_drift(&p, &p);
        assert_eq!((d.drift_a, d.drift_c), (0.0, 0.0));
        assert!(d.max_cq > 0.0);
        assert!(!LazyRadii::unbounded().exceeded_by(&d));
    }

    #[test]
    fn gram_csv_has_schema_header() {
        let g = GramReport::from_matrix(2, vec![1.0, 0.5, 0.5, 2.0]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# schema=1\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
