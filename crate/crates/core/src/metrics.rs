//! Sparsity and calibration measures.

use crate::error::{Error, Result};

/// Default magnitude threshold for [`l0_eps_fraction`].
pub const DEFAULT_L0_EPS: f64 = 1e-5;

/// Fraction of entries with `|v| < eps` (strict).
pub fn l0_eps_fraction(values: &[f64], eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold must be non-negative, got {eps}")));
    }
    if values.is_empty() {
        return Ok(0.0);
    }
    Ok(values.iter().filter(|v| v.abs() < eps).count() as f64 / values.len() as f64)
}

fn check_rows(probs: &[f64], k: usize, labels: &[usize]) -> Result<()> {
    if k == 0 || probs.len() != k * labels.len() {
        return Err(Error::LengthMismatch { expected: k * labels.len(), got: probs.len() });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean over samples and classes of `(p_k - y_k)²`.
pub fn brier_score(probs: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    check_rows(probs, k, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &l) in probs.chunks(k).zip(labels) {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("probability row sums to {s}")));
        }
        total += row.iter().enumerate().map(|(c, p)| (p - if c == l { 1.0 } else { 0.0 }).powi(2)).sum::<f64>();
    }
    Ok(total / (labels.len() * k) as f64)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

pub fn top1_accuracy(probs: &[f64], k: usize, labels: &[usize]) -> Result<f64> {
    check_rows(probs, k, labels)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = probs.chunks(k).zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityRecord {
    pub step: u64,
    pub param_fraction: f64,
    pub grad_fraction: f64,
}

/// Per-step ℓ₀^ε fractions of parameters and gradients.
#[derive(Debug, Clone, Default)]
pub struct SparsityTrace {
    pub eps: f64,
    pub records: Vec<SparsityRecord>,
}

impl SparsityTrace {
    pub fn new(eps: f64) -> Self {
        Self { eps, records: Vec::new() }
    }

    pub fn record(&mut self, step: u64, params: &[f64], grads: &[f64]) -> Result<SparsityRecord> {
        let r = SparsityRecord {
            step,
            param_fraction: l0_eps_fraction(params, self.eps)?,
            grad_fraction: l0_eps_fraction(grads, self.eps)?,
        };
        self.records.push(r);
        Ok(r)
    }
}
