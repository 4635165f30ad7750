//! Weighted least-squares objectives over groups of residual terms.
//!
//! Regression is a single group of point evaluations. The physics-informed
//! loss is two groups: interior operator residuals, then boundary values.
//! Each group `g` contributes `(1/N_g) sum_i (Op_i[f](x_i) - target_i)^2`, and
//! the normalized residual of a term is `s_i = (Op_i[f](x_i) - target_i) / sqrt(N_g)`.

use crate::error::{KanError, Result};
use crate::model::{evaluate_terms, weighted_gradient, Dataset, KanParams, ParamGrad, ResidualTerm};

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    terms: Vec<ResidualTerm>,
    sizes: Vec<usize>,
}

/// Mini-batch index multisets, one per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<Vec<usize>>,
}

impl Batch {
    /// Every index of every group exactly once, in order.
    pub fn full(objective: &Objective) -> Self {
        Batch { indices: objective.group_sizes().into_iter().map(|n| (0..n).collect()).collect() }
    }
}

impl Objective {
    pub fn new(groups: Vec<Vec<ResidualTerm>>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(KanError::InvalidData("every residual group needs at least one term".into()));
        }
        let sizes = groups.iter().map(Vec::len).collect();
        Ok(Objective { terms: groups.into_iter().flatten().collect(), sizes })
    }

    pub fn regression(data: &Dataset) -> Self {
        let terms = (0..data.len()).map(|i| ResidualTerm::value(data.row(i).to_vec(), data.targets()[i])).collect();
        Objective { terms, sizes: vec![data.len()] }
    }

    /// Terms of each group.
    pub fn groups(&self) -> Vec<&[ResidualTerm]> {
        let mut offset = 0;
        self.sizes
            .iter()
            .map(|&n| {
                let g = &self.terms[offset..offset + n];
                offset += n;
                g
            })
            .collect()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.sizes.clone()
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    /// All terms, group by group.
    pub fn terms(&self) -> &[ResidualTerm] {
        &self.terms
    }

    /// `1/sqrt(N_g)` for every term, in [`Self::terms`] order.
    pub fn term_scales(&self) -> Vec<f64> {
        self.sizes.iter().flat_map(|&n| std::iter::repeat_n(1.0 / (n as f64).sqrt(), n)).collect()
    }

    /// Unnormalized residuals `Op_i[f](x_i) - target_i`, flattened group by group.
    pub fn raw_residuals(&self, params: &KanParams) -> Result<Vec<f64>> {
        let values = evaluate_terms(params, &self.terms)?;
        Ok(values.iter().zip(&self.terms).map(|(v, t)| v - t.target).collect())
    }

    /// Normalized residual vector `s`.
    pub fn residuals(&self, params: &KanParams) -> Result<Vec<f64>> {
        let raw = self.raw_residuals(params)?;
        Ok(self.normalize(&raw))
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(self.term_scales()).map(|(r, s)| r * s).collect()
    }

    /// `sum_g (1/N_g) sum_i r_i^2` from precomputed raw residuals.
    pub fn loss_from_raw(&self, raw: &[f64]) -> f64 {
        let mut offset = 0;
        let mut total = 0.0;
        for &n in &self.sizes {
            let sq: f64 = raw[offset..offset + n].iter().map(|r| r * r).sum();
            total += sq / n as f64;
            offset += n;
        }
        total
    }

    pub fn loss(&self, params: &KanParams) -> Result<f64> {
        Ok(self.loss_from_raw(&self.raw_residuals(params)?))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.indices.len() != self.sizes.len() {
            return Err(KanError::DimensionMismatch { expected: self.sizes.len(), got: batch.indices.len() });
        }
        for (idx, &n) in batch.indices.iter().zip(&self.sizes) {
            if idx.is_empty() {
                return Err(KanError::InvalidConfig("mini-batch groups must be nonempty".into()));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(KanError::IndexOutOfRange { index: bad, count: n });
            }
        }
        Ok(())
    }

    /// Mini-batch loss `sum_g (1/b_g) sum_{i in I_g} r_i^2`.
    pub fn batch_loss_from_raw(&self, raw: &[f64], batch: &Batch) -> Result<f64> {
        self.check_batch(batch)?;
        let mut offset = 0;
        let mut total = 0.0;
        for (&n, idx) in self.sizes.iter().zip(&batch.indices) {
            let sq: f64 = idx.iter().map(|&i| raw[offset + i] * raw[offset + i]).sum();
            total += sq / idx.len() as f64;
            offset += n;
        }
        Ok(total)
    }

    /// Gradient of the mini-batch loss,
    /// `sum_g (2/b_g) sum_{i in I_g} r_i dOp_i[f]/dtheta`.
    ///
    /// With [`Batch::full`] this is the full-loss gradient.
    pub fn batch_gradient_from_raw(&self, params: &KanParams, raw: &[f64], batch: &Batch) -> Result<ParamGrad> {
        self.check_batch(batch)?;
        let mut terms = Vec::new();
        let mut coeffs = Vec::new();
        let mut offset = 0;
        for (&n, idx) in self.sizes.iter().zip(&batch.indices) {
            let weight = 2.0 / idx.len() as f64;
            for &i in idx {
                terms.push(&self.terms[offset + i]);
                coeffs.push(weight * raw[offset + i]);
            }
            offset += n;
        }
        weighted_gradient(params, &terms, &coeffs)
    }

    /// Full-loss gradient.
    pub fn gradient(&self, params: &KanParams) -> Result<ParamGrad> {
        let raw = self.raw_residuals(params)?;
        self.batch_gradient_from_raw(params, &raw, &Batch::full(self))
    }

    /// Same terms, rows reordered by `perm` within each group.
    pub fn permuted(&self, perms: &[Vec<usize>]) -> Result<Self> {
        let groups =
            self.groups().into_iter().zip(perms).map(|(g, p)| p.iter().map(|&i| g[i].clone()).collect()).collect();
        Objective::new(groups)
    }
}
