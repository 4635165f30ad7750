//! Small summary statistics for sweep reports.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::statistics::{Data, Median, OrderStatistics};

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean (`n - 1` denominator); 0 for a single value.
pub fn std_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

pub fn median(v: &[f64]) -> f64 {
    Data::new(v.to_vec()).median()
}

pub fn percentile(v: &[f64], p: usize) -> f64 {
    Data::new(v.to_vec()).percentile(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval of the slope; degenerate with two points.
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Least-squares fit of `ln y` against `ln x`. `None` unless every value is
/// positive and there are at least two points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<SlopeFit> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|&v| v <= 0.0 || !v.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = lx.len() as f64 - 2.0;
    let (ci_low, ci_high) = if dof >= 1.0 {
        let ssr: f64 = lx.iter().zip(&ly).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        let se = (ssr / dof / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, dof).expect("positive dof").inverse_cdf(0.975);
        (slope - t * se, slope + t * se)
    } else {
        (slope, slope)
    };
    Some(SlopeFit { slope, intercept, ci_low, ci_high })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let x = [64.0, 256.0, 1024.0, 4096.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        let fit = loglog_slope(&x, &y).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!((fit.ci_high - fit.ci_low).abs() < 1e-9);
        assert!(loglog_slope(&x, &[1.0, 0.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn order_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(std_error(&[5.0]), 0.0);
        assert!(percentile(&(1..=100).map(f64::from).collect::<Vec<_>>(), 95) >= 94.0);
    }
}
