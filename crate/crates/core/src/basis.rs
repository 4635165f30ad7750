//! Univariate basis families `{b_k}` and transformation functions `phi`.
//!
//! Every family evaluates values and exact derivatives up to third order.
//! Third order is needed by the operator-gradient kernels in [`crate::pinn`];
//! plain regression only ever asks for order two.

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Highest derivative order any family supports.
pub const MAX_ORDER: usize = 3;

/// Descriptor of a basis family `{b_k}` with `count` members.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    /// Chebyshev polynomials of the first kind, `b_k = T_k`, k = 0..count.
    Chebyshev { count: usize },
    /// Monomials `b_k(x) = x^k`, k = 0..count.
    Monomial { count: usize },
    /// Gaussian bumps `exp(-(x - c_k)^2 / (2 w^2))`, one per center.
    GaussianRbf { centers: Vec<f64>, width: f64 },
    /// B-splines of the given order (degree + 1) over a nondecreasing knot
    /// vector; `count = knots.len() - order`.
    #[cfg(feature = "bspline")]
    BSpline { knots: Vec<f64>, order: usize },
}

impl BasisSpec {
    pub fn chebyshev(count: usize) -> Self {
        BasisSpec::Chebyshev { count }
    }

    pub fn monomial(count: usize) -> Self {
        BasisSpec::Monomial { count }
    }

    /// `count` Gaussian bumps with centers evenly spread over `[lo, hi]` and
    /// width equal to the center spacing.
    pub fn gaussian_rbf_uniform(count: usize, lo: f64, hi: f64) -> Self {
        let centers: Vec<f64> = if count == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
        };
        let width = if count > 1 { (hi - lo) / (count - 1) as f64 } else { hi - lo };
        BasisSpec::GaussianRbf { centers, width }
    }

    /// Uniform knot vector extended `order - 1` cells past `[lo, hi]` on each
    /// side, giving `count` splines that cover `[lo, hi]`.
    #[cfg(feature = "bspline")]
    pub fn bspline_uniform(count: usize, order: usize, lo: f64, hi: f64) -> Self {
        let cells = count.saturating_sub(order - 1).max(1);
        let step = (hi - lo) / cells as f64;
        let knots = (0..count + order).map(|i| lo + (i as f64 - (order as f64 - 1.0)) * step).collect();
        BasisSpec::BSpline { knots, order }
    }

    /// Number of basis functions `n_d`.
    pub fn count(&self) -> usize {
        match self {
            BasisSpec::Chebyshev { count } | BasisSpec::Monomial { count } => *count,
            BasisSpec::GaussianRbf { centers, .. } => centers.len(),
            #[cfg(feature = "bspline")]
            BasisSpec::BSpline { knots, order } => knots.len().saturating_sub(*order),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            BasisSpec::Chebyshev { .. } => "chebyshev",
            BasisSpec::Monomial { .. } => "monomial",
            BasisSpec::GaussianRbf { .. } => "gaussian_rbf",
            #[cfg(feature = "bspline")]
            BasisSpec::BSpline { .. } => "bspline",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisSpec::Chebyshev { count } | BasisSpec::Monomial { count } => {
                if *count == 0 {
                    return Err(KanError::InvalidBasis("count must be at least 1".into()));
                }
            }
            BasisSpec::GaussianRbf { centers, width } => {
                if centers.is_empty() {
                    return Err(KanError::InvalidBasis("RBF needs at least one center".into()));
                }
                if !(width.is_finite() && *width > 0.0) {
                    return Err(KanError::InvalidBasis(format!("RBF width must be > 0, got {width}")));
                }
                if centers.iter().any(|c| !c.is_finite()) {
                    return Err(KanError::InvalidBasis("RBF centers must be finite".into()));
                }
            }
            #[cfg(feature = "bspline")]
            BasisSpec::BSpline { knots, order } => {
                if *order == 0 {
                    return Err(KanError::InvalidBasis("B-spline order must be >= 1".into()));
                }
                if knots.len() < order + 1 {
                    return Err(KanError::InvalidBasis(format!(
                        "B-spline of order {order} needs at least {} knots, got {}",
                        order + 1,
                        knots.len()
                    )));
                }
                if knots.iter().any(|t| !t.is_finite()) || knots.windows(2).any(|w| w[1] < w[0]) {
                    return Err(KanError::InvalidBasis("knot vector must be finite and nondecreasing".into()));
                }
            }
        }
        Ok(())
    }

    /// `b_k^{(order)}(x)` for a single member, `k` counted from zero.
    pub fn eval(&self, k: usize, x: f64, order: usize) -> Result<f64> {
        let count = self.count();
        if k >= count {
            return Err(KanError::IndexOutOfRange { index: k, count });
        }
        if order > MAX_ORDER {
            return Err(KanError::UnsupportedOrder(order));
        }
        if !x.is_finite() {
            return Err(KanError::NonFinite(x));
        }
        let mut out = vec![0.0; (order + 1) * count];
        self.eval_into(x, order, &mut out);
        Ok(out[order * count + k])
    }

    /// Fills `out[r * count + k] = b_k^{(r)}(x)` for `r = 0..=max_order`.
    ///
    /// Hot-path entry point: the spec is assumed validated and `out` must
    /// hold at least `(max_order + 1) * count` entries.
    pub fn eval_into(&self, x: f64, max_order: usize, out: &mut [f64]) {
        debug_assert!(max_order <= MAX_ORDER);
        let count = self.count();
        debug_assert!(out.len() >= (max_order + 1) * count);
        match self {
            BasisSpec::Chebyshev { .. } => chebyshev_into(x, count, max_order, out),
            BasisSpec::Monomial { .. } => monomial_into(x, count, max_order, out),
            BasisSpec::GaussianRbf { centers, width } => rbf_into(x, centers, *width, max_order, out),
            #[cfg(feature = "bspline")]
            BasisSpec::BSpline { knots, order } => bspline_into(x, knots, *order, max_order, out),
        }
    }
}

/// Three-term recurrence `T_{k+1} = 2x T_k - T_{k-1}`, differentiated:
/// `T^{(r)}_{k+1} = 2r T^{(r-1)}_k + 2x T^{(r)}_k - T^{(r)}_{k-1}`.
fn chebyshev_into(x: f64, count: usize, max_order: usize, out: &mut [f64]) {
    for r in 0..=max_order {
        let row = r * count;
        out[row] = if r == 0 { 1.0 } else { 0.0 };
        if count > 1 {
            out[row + 1] = match r {
                0 => x,
                1 => 1.0,
                _ => 0.0,
            };
        }
        for k in 1..count.saturating_sub(1) {
            let lower = if r > 0 { 2.0 * r as f64 * out[row - count + k] } else { 0.0 };
            out[row + k + 1] = lower + 2.0 * x * out[row + k] - out[row + k - 1];
        }
    }
}

fn monomial_into(x: f64, count: usize, max_order: usize, out: &mut [f64]) {
    for r in 0..=max_order {
        for k in 0..count {
            out[r * count + k] = if k < r {
                0.0
            } else {
                // k (k-1) ... (k-r+1) x^(k-r)
                let falling: f64 = (0..r).map(|j| (k - j) as f64).product();
                falling * x.powi((k - r) as i32)
            };
        }
    }
}

fn rbf_into(x: f64, centers: &[f64], width: f64, max_order: usize, out: &mut [f64]) {
    let count = centers.len();
    let inv_w2 = 1.0 / (width * width);
    for (k, &c) in centers.iter().enumerate() {
        let d = x - c;
        let e = (-0.5 * d * d * inv_w2).exp();
        let u = d * inv_w2;
        out[k] = e;
        if max_order >= 1 {
            out[count + k] = -u * e;
        }
        if max_order >= 2 {
            out[2 * count + k] = (u * u - inv_w2) * e;
        }
        if max_order >= 3 {
            out[3 * count + k] = (3.0 * u * inv_w2 - u * u * u) * e;
        }
    }
}

/// Cox-de Boor values for every order `1..=order`; `table[j][i] = B_{i,j}(x)`.
/// Order-one pieces use the right-limit convention `t_i <= x < t_{i+1}`.
#[cfg(feature = "bspline")]
fn cox_de_boor_table(x: f64, knots: &[f64], order: usize) -> Vec<Vec<f64>> {
    let mut table = vec![Vec::new(); order + 1];
    table[1] = (0..knots.len() - 1).map(|i| if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 }).collect();
    for j in 2..=order {
        let prev = &table[j - 1];
        let row: Vec<f64> = (0..knots.len() - j)
            .map(|i| {
                let left = ratio(x - knots[i], knots[i + j - 1] - knots[i]) * prev[i];
                let right = ratio(knots[i + j] - x, knots[i + j] - knots[i + 1]) * prev[i + 1];
                left + right
            })
            .collect();
        table[j] = row;
    }
    table
}

/// `num / den` with the 0/0 = 0 convention for repeated knots.
#[cfg(feature = "bspline")]
fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `D^r B_{i,j} = (j-1) [D^{r-1} B_{i,j-1} / (t_{i+j-1} - t_i) - D^{r-1} B_{i+1,j-1} / (t_{i+j} - t_{i+1})]`.
#[cfg(feature = "bspline")]
fn bspline_derivative(table: &[Vec<f64>], knots: &[f64], i: usize, j: usize, r: usize) -> f64 {
    if r == 0 {
        return table[j][i];
    }
    if j == 1 {
        return 0.0;
    }
    let scale = (j - 1) as f64;
    let left = ratio(bspline_derivative(table, knots, i, j - 1, r - 1), knots[i + j - 1] - knots[i]);
    let right = ratio(bspline_derivative(table, knots, i + 1, j - 1, r - 1), knots[i + j] - knots[i + 1]);
    scale * (left - right)
}

#[cfg(feature = "bspline")]
fn bspline_into(x: f64, knots: &[f64], order: usize, max_order: usize, out: &mut [f64]) {
    let count = knots.len() - order;
    let table = cox_de_boor_table(x, knots, order);
    for r in 0..=max_order {
        for i in 0..count {
            out[r * count + i] = bspline_derivative(&table, knots, i, order, r);
        }
    }
}

/// Transformation `phi` applied to each hidden pre-activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformSpec {
    Tanh,
    Sigmoid,
    Identity,
}

impl TransformSpec {
    /// `phi^{(order)}(z)`.
    pub fn eval(&self, z: f64, order: usize) -> Result<f64> {
        if order > MAX_ORDER {
            return Err(KanError::UnsupportedOrder(order));
        }
        if !z.is_finite() {
            return Err(KanError::NonFinite(z));
        }
        Ok(self.derivatives(z)[order])
    }

    /// `[phi, phi', phi'', phi''']` at `z`, closed form.
    pub fn derivatives(&self, z: f64) -> [f64; 4] {
        match self {
            TransformSpec::Tanh => {
                let t = z.tanh();
                let s = 1.0 - t * t;
                [t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)]
            }
            TransformSpec::Sigmoid => {
                let s = sigmoid(z);
                let d1 = s * (1.0 - s);
                [s, d1, d1 * (1.0 - 2.0 * s), d1 * (1.0 - 6.0 * s + 6.0 * s * s)]
            }
            TransformSpec::Identity => [z, 1.0, 0.0, 0.0],
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, TransformSpec::Identity)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Outcome of [`validate_boundedness`]; advisory only.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BoundednessReport {
    pub warnings: Vec<String>,
}

impl BoundednessReport {
    pub fn is_ok(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Checks that `b_k`, `b_k'` and `b_k''` stay bounded on the image of `phi`.
pub fn validate_boundedness(basis: &BasisSpec, transform: TransformSpec) -> BoundednessReport {
    let mut warnings = Vec::new();
    if !transform.is_bounded() {
        match basis {
            BasisSpec::Chebyshev { .. } | BasisSpec::Monomial { .. } => warnings.push(format!(
                "unbounded image: {} basis under the identity transform is unbounded on R",
                basis.family_name()
            )),
            BasisSpec::GaussianRbf { .. } => {}
            #[cfg(feature = "bspline")]
            BasisSpec::BSpline { .. } => warnings
                .push("unbounded image: identity transform can push hidden activations outside the knot span".into()),
        }
    }
    BoundednessReport { warnings }
}
