//! Group action on feature maps and transform-and-compare equivariance audits.

use super::{Model, ParamVars};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::groups::{FieldType, GroupElement};
use crate::tensor::{relative_error, Tensor};

/// `max |a - b| / max(|b|_∞, 1e-12)`.
pub fn relative_max_error(a: &Tensor, b: &Tensor) -> f64 {
    relative_error(a.data(), b.data(), 1e-12)
}

/// Applies `T_g` to a `(B, C, H, W)` feature map (or a `(B, C)` vector):
/// `(T_g f)(x) = ρ(g) f(g⁻¹x)`. Spatial transforms use the exact grid action
/// about the image centre, so `g` must be a multiple of 90° (optionally
/// reflected) and the map square.
pub fn transform_features(t: &Tensor, field: &FieldType, g: &GroupElement) -> Result<Tensor> {
    let shape = t.shape();
    let c = field.total_channels();
    if !(shape.len() == 2 || shape.len() == 4) || shape[1] != c {
        return Err(Error::ShapeMismatch(format!("features {shape:?} for {c} channels")));
    }
    let m = field.fiber_matrix(g)?;
    let rows: Vec<Vec<(usize, f64)>> = (0..c)
        .map(|r| (0..c).filter(|&k| m[(r, k)] != 0.0).map(|k| (k, m[(r, k)])).collect())
        .collect();
    let (h, w) = if shape.len() == 4 { (shape[2], shape[3]) } else { (1, 1) };
    if shape.len() == 4 && h != w {
        return Err(Error::ShapeMismatch(format!("spatial transforms need square maps, got {h}x{w}")));
    }
    // doubled coordinates keep even-sized grids on integers
    let mut source = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (2 * j as i64 - (w as i64 - 1), (h as i64 - 1) - 2 * i as i64);
            let (xs, ys) = g.apply_exact_inverse(x, y).ok_or_else(|| Error::InexactElement(g.to_string()))?;
            let (js, is) = ((xs + w as i64 - 1) / 2, ((h as i64 - 1) - ys) / 2);
            source.push(is as usize * w + js as usize);
        }
    }
    let hw = h * w;
    let data = t.data();
    let mut out = vec![0.0; data.len()];
    for b in 0..shape[0] {
        for (r, row) in rows.iter().enumerate() {
            let dst = &mut out[(b * c + r) * hw..(b * c + r + 1) * hw];
            for &(k, v) in row {
                let src = &data[(b * c + k) * hw..(b * c + k + 1) * hw];
                for (p, d) in dst.iter_mut().enumerate() {
                    *d += v * src[source[p]];
                }
            }
        }
    }
    Tensor::new(shape, out)
}

/// Worst-case errors for one layer over the audited elements.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub name: String,
    pub kind: &'static str,
    /// Layer applied alone to a transformed input versus the transformed
    /// output; `None` when no audited element belongs to the layer's group.
    pub isolated: Option<f64>,
    /// Transformed-input forward pass compared with the transformed feature.
    pub chained: Option<f64>,
}

/// Results for one group element.
#[derive(Debug, Clone)]
pub struct ElementCheck {
    pub element: GroupElement,
    /// Equivariance error of the feature entering group pooling; `None`
    /// when that feature lives on a subgroup not containing the element.
    pub feature: Option<f64>,
    /// Invariance error of the pooled features entering the head.
    pub pooled: f64,
    pub logits: f64,
}

#[derive(Debug, Clone)]
pub struct EquivarianceReport {
    pub layers: Vec<LayerCheck>,
    pub elements: Vec<ElementCheck>,
}

impl EquivarianceReport {
    pub fn max_feature_error(&self) -> Option<f64> {
        self.elements.iter().map(|e| e.feature).try_fold(0.0f64, |m, f| f.map(|f| m.max(f)))
    }

    pub fn max_logit_error(&self) -> f64 {
        self.elements.iter().fold(0.0, |m, e| m.max(e.logits))
    }

    pub fn max_isolated_error(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.isolated).fold(0.0, f64::max)
    }
}

fn both_contain(a: &FieldType, b: &FieldType, g: &GroupElement) -> bool {
    a.group().contains(g) && b.group().contains(g)
}

fn fold_max(slot: &mut Option<f64>, v: f64) {
    *slot = Some(slot.map_or(v, |m| m.max(v)));
}

/// Transform-and-compare audit of every layer and of the whole network on a
/// batch of images, for each of the given elements.
pub fn check_equivariance(model: &Model, images: &Tensor, elements: &[GroupElement]) -> Result<EquivarianceReport> {
    let batch = images.shape()[0];
    let input_field = model.input_field().clone();
    let mut g0 = Graph::new(batch);
    let x0 = g0.input(images.clone())?;
    let (_, trace0) = model.forward_trace(&mut g0, x0)?;
    let layers = model.layers();

    let mut checks: Vec<LayerCheck> = trace0
        .iter()
        .map(|e| LayerCheck { name: e.name.clone(), kind: e.kind, isolated: None, chained: None })
        .collect();
    let pool_idx = trace0.iter().position(|e| e.kind == "group_pool").ok_or(Error::InvalidArgument("model has no group pooling".into()))?;
    let logit_idx = trace0.len() - 1;
    let mut per_element = Vec::new();

    for g in elements {
        let tx = transform_features(images, &input_field, g)?;
        let mut g1 = Graph::new(batch);
        let x1 = g1.input(tx)?;
        let (_, trace1) = model.forward_trace(&mut g1, x1)?;
        let mut feature = None;
        for (k, (e0, e1)) in trace0.iter().zip(&trace1).enumerate() {
            if e0.field.group().contains(g) {
                let want = transform_features(g0.value(e0.var), &e0.field, g)?;
                let err = relative_max_error(g1.value(e1.var), &want);
                fold_max(&mut checks[k].chained, err);
                if k + 1 == pool_idx {
                    feature = Some(err);
                }
            }
            if let Some(li) = e0.layer {
                let node = layers[li];
                if both_contain(&node.field_in, &node.field_out, g) {
                    let input = transform_features(g0.value(e0.input), &node.field_in, g)?;
                    let mut gi = Graph::new(batch);
                    let xi = gi.input(input)?;
                    let mut pv = ParamVars::new(&model.params);
                    let yi = model.apply_layer(node, &mut gi, &mut pv, xi)?;
                    let want = transform_features(g0.value(e0.var), &node.field_out, g)?;
                    fold_max(&mut checks[k].isolated, relative_max_error(gi.value(yi), &want));
                }
            }
        }
        let pooled_idx = pool_idx + 1;
        per_element.push(ElementCheck {
            element: *g,
            feature,
            pooled: relative_max_error(g1.value(trace1[pooled_idx].var), g0.value(trace0[pooled_idx].var)),
            logits: relative_max_error(g1.value(trace1[logit_idx].var), g0.value(trace0[logit_idx].var)),
        });
    }
    Ok(EquivarianceReport { layers: checks, elements: per_element })
}
