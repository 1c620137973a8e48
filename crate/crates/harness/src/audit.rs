//! Equivariance audit of a whole network under circular padding.

use std::sync::Arc;

use equidp_core::autodiff::Padding;
use equidp_core::groups::GroupElement;
use equidp_core::layers::{check_equivariance, EquivarianceReport, Layer, Model};
use equidp_core::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{HarnessError, Result};
use crate::train::stream_rng;

/// Largest tolerated relative error.
pub const AUDIT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerAudit {
    pub name: String,
    pub kind: &'static str,
    /// `max(isolated, chained)`, `None` if no audited element acts on it.
    pub error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub elements: Vec<GroupElement>,
    pub layers: Vec<LayerAudit>,
    /// Logit invariance error per element; `None` for elements outside the
    /// group acting on the head.
    pub logits: Vec<Option<f64>>,
    pub raw: EquivarianceReport,
}

impl AuditReport {
    pub fn max_layer_error(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.error).fold(0.0, f64::max)
    }

    pub fn max_logit_error(&self) -> f64 {
        self.logits.iter().flatten().fold(0.0, |m, v| m.max(*v))
    }

    pub fn worst_layer(&self) -> Option<&LayerAudit> {
        self.layers.iter().filter(|l| l.error.is_some()).max_by(|a, b| a.error.partial_cmp(&b.error).expect("finite"))
    }

    pub fn passed(&self) -> bool {
        self.max_layer_error() <= AUDIT_TOLERANCE && self.max_logit_error() <= AUDIT_TOLERANCE
    }

    /// Turns a failed audit into [`HarnessError::AuditFailed`].
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let worst = self.worst_layer().map(|l| format!("{} ({})", l.name, l.kind)).unwrap_or_default();
        Err(HarnessError::AuditFailed(format!(
            "max layer error {:.3e} at {worst}, max logit error {:.3e}, tolerance {AUDIT_TOLERANCE:.0e}",
            self.max_layer_error(),
            self.max_logit_error()
        )))
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l.error {
                Some(e) => format!("layer={} kind={} error={e:.3e}", l.name, l.kind),
                None => format!("layer={} kind={} error=skipped", l.name, l.kind),
            })
            .collect();
        for (g, e) in self.elements.iter().zip(&self.logits) {
            out.push(match e {
                Some(e) => format!("element={g} logit_error={e:.3e}"),
                None => format!("element={g} logit_error=skipped"),
            });
        }
        out
    }
}

/// Random audit inputs `(batch, 3, side, side)` with standard normal pixels.
pub fn audit_inputs(batch: usize, side: usize, seed: u64) -> Result<Tensor> {
    let mut rng = stream_rng(seed, 0);
    let data = (0..batch * 3 * side * side).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::new(&[batch, 3, side, side], data)?)
}

/// Audits every exactly representable element of the model's group. The
/// model is switched to circular padding, under which the grid action is an
/// exact symmetry.
pub fn audit(model: &mut Model, batch: usize, seed: u64) -> Result<AuditReport> {
    let saved = model.padding;
    model.padding = match saved {
        Padding::Zero(p) | Padding::Circular(p) => Padding::Circular(p),
        Padding::None => Padding::None,
    };
    let result = audit_inner(model, batch, seed);
    model.padding = saved;
    result
}

fn audit_inner(model: &Model, batch: usize, seed: u64) -> Result<AuditReport> {
    let elements = model.group.exact_steering_elements();
    let images = audit_inputs(batch, model.image_size, seed)?;
    let raw = check_equivariance(model, &images, &elements)?;
    let layers = raw
        .layers
        .iter()
        .map(|l| LayerAudit {
            name: l.name.clone(),
            kind: l.kind,
            error: match (l.isolated, l.chained) {
                (None, None) => None,
                (a, b) => Some(a.unwrap_or(0.0).max(b.unwrap_or(0.0))),
            },
        })
        .collect();
    let head_group = model
        .layers()
        .iter()
        .find(|l| matches!(l.layer, Layer::Linear { .. }))
        .map(|l| l.field_in.group())
        .ok_or_else(|| HarnessError::AuditFailed("model has no classifier head".into()))?;
    let logits = raw.elements.iter().map(|e| head_group.contains(&e.element).then_some(e.logits)).collect();
    Ok(AuditReport { elements, layers, logits, raw })
}

/// Adds a random non-equivariant offset (entries drawn from `N(0, magnitude²)`) to the
/// expanded kernel of the `index`-th convolution. Returns the layer name.
pub fn inject_kernel_fault(model: &mut Model, index: usize, magnitude: f64, seed: u64) -> Result<String> {
    let mut rng = stream_rng(seed, 7);
    let mut convs = model
        .layers_mut()
        .into_iter()
        .filter(|l| matches!(l.layer, Layer::Conv { .. }))
        .collect::<Vec<_>>();
    let count = convs.len();
    let node = convs
        .get_mut(index)
        .ok_or_else(|| HarnessError::Config(format!("model has {count} convolutions, asked for index {index}")))?;
    let Layer::Conv { plan, .. } = &mut node.layer else { unreachable!() };
    let [a, b, c, d] = plan.kernel_shape();
    let offset = (0..a * b * c * d).map(|_| magnitude * rng.sample::<f64, _>(StandardNormal)).collect();
    *plan = Arc::new((**plan).clone().with_kernel_offset(offset)?);
    Ok(node.name.clone())
}
