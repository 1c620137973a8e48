use equidp_core::autodiff::{softmax_rows, Graph};
use equidp_core::layers::Model;
use equidp_core::metrics::{brier_score, top1_accuracy};
use rayon::prelude::*;

use crate::data::{Dataset, Normalization};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub brier: f64,
    /// Mean cross-entropy.
    pub loss: f64,
    pub count: usize,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "accuracy={:.6} brier={:.6} loss={:.6} count={}", self.accuracy, self.brier, self.loss, self.count)
    }
}

/// Class probabilities `(n, K)` row-major for the whole dataset.
pub fn predict(model: &Model, data: &Dataset, norm: &Normalization, micro_batch: usize, f32_mode: bool) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let k = model.num_classes;
    let parts = idx
        .par_chunks(micro_batch.max(1))
        .map(|c| -> Result<Vec<f64>> {
            let mut g = Graph::new(c.len()).with_f32_rounding(f32_mode);
            let x = g.input(data.batch(c, norm)?)?;
            let logits = model.forward(&mut g, x)?;
            Ok(softmax_rows(g.value(logits).data(), k))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

pub fn evaluate(model: &Model, data: &Dataset, norm: &Normalization, micro_batch: usize, f32_mode: bool) -> Result<EvalReport> {
    let probs = predict(model, data, norm, micro_batch, f32_mode)?;
    let k = model.num_classes;
    let loss = probs
        .chunks(k)
        .zip(&data.labels)
        .map(|(p, &y)| -p[y].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / data.len().max(1) as f64;
    Ok(EvalReport {
        accuracy: top1_accuracy(&probs, k, &data.labels)?,
        brier: brier_score(&probs, k, &data.labels)?,
        loss,
        count: data.len(),
    })
}
