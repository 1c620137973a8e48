//! Normalization layers that commute with the group action.
//!
//! Both layers normalize disjoint sets of entries of each sample
//! independently, optionally mean-centring a set, and then apply a per-field
//! scale and (for invariant components only) a bias.

use std::sync::Arc;

use crate::autodiff::{Ctx, Graph, Var};
use crate::error::{Error, Result};
use crate::groups::{FieldType, RepKind};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// One normalization set: flat per-sample indices plus affine bookkeeping.
struct NormSet {
    indices: Vec<usize>,
    center: bool,
    /// Index into the weight vector for every entry of the set.
    weight: Vec<usize>,
    /// Index into the bias vector for every entry, if biased.
    bias: Vec<Option<usize>>,
}

struct SetNorm {
    sets: Vec<NormSet>,
    num_weights: usize,
    num_biases: usize,
}

impl SetNorm {
    /// Normalizes one sample; returns `(output, x̂, per-set scales)`.
    fn forward(&self, x: &[f64], w: Option<&[f64]>, b: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut scales = Vec::with_capacity(self.sets.len());
        for set in &self.sets {
            let n = set.indices.len() as f64;
            let mean = if set.center { set.indices.iter().map(|&i| x[i]).sum::<f64>() / n } else { 0.0 };
            let var = set.indices.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
            let s = (var + NORM_EPS).sqrt();
            for (k, &i) in set.indices.iter().enumerate() {
                let h = (x[i] - mean) / s;
                xhat[i] = h;
                let mut y = h * w.map_or(1.0, |w| w[set.weight[k]]);
                if let (Some(b), Some(bi)) = (b, set.bias[k]) {
                    y += b[bi];
                }
                out[i] = y;
            }
            scales.push(s);
        }
        (out, xhat, scales)
    }

    fn record(self: Arc<Self>, g: &mut Graph, x: Var, w: Option<Var>, b: Option<Var>) -> Result<Var> {
        let bs = g.batch();
        let item = g.value(x).row_len();
        let (wv, bv) = (w.map(|v| g.value(v).data().to_vec()), b.map(|v| g.value(v).data().to_vec()));
        let mut out = Vec::with_capacity(bs * item);
        let mut xhats = Vec::with_capacity(bs * item);
        let mut scales = Vec::with_capacity(bs);
        for s in 0..bs {
            let (o, h, sc) = self.forward(&g.value(x).data()[s * item..(s + 1) * item], wv.as_deref(), bv.as_deref());
            out.extend(o);
            xhats.extend(h);
            scales.push(sc);
        }
        let value = Tensor::new(g.value(x).shape(), out)?;
        let mut inputs = vec![x];
        inputs.extend(w);
        inputs.extend(b);
        let (has_w, has_b) = (w.is_some(), b.is_some());
        let this = self.clone();
        g.custom(
            &inputs,
            value,
            Box::new(move |ctx: &Ctx| {
                let w = has_w.then(|| ctx.inputs[1].data());
                let gd = ctx.grad.data();
                let mut dx = vec![0.0; bs * item];
                let mut dw = vec![0.0; bs * this.num_weights];
                let mut db = vec![0.0; bs * this.num_biases];
                for s in 0..bs {
                    let gs = &gd[s * item..(s + 1) * item];
                    let hs = &xhats[s * item..(s + 1) * item];
                    let dxs = &mut dx[s * item..(s + 1) * item];
                    for (set, &sc) in this.sets.iter().zip(&scales[s]) {
                        let n = set.indices.len() as f64;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for (k, &i) in set.indices.iter().enumerate() {
                            let dh = gs[i] * w.map_or(1.0, |w| w[set.weight[k]]);
                            mean_dh += dh;
                            mean_dh_h += dh * hs[i];
                            dw[s * this.num_weights + set.weight[k]] += gs[i] * hs[i];
                            if let Some(bi) = set.bias[k] {
                                db[s * this.num_biases + bi] += gs[i];
                            }
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for (k, &i) in set.indices.iter().enumerate() {
                            let dh = gs[i] * w.map_or(1.0, |w| w[set.weight[k]]);
                            let centred = if set.center { mean_dh } else { 0.0 };
                            dxs[i] = (dh - centred - hs[i] * mean_dh_h) / sc;
                        }
                    }
                }
                let mut grads = vec![Some(Tensor::new(ctx.inputs[0].shape(), dx)?)];
                if has_w {
                    grads.push(Some(Tensor::new(&[bs, this.num_weights], dw)?));
                }
                if has_b {
                    grads.push(Some(Tensor::new(&[bs, this.num_biases], db)?));
                }
                Ok(grads)
            }),
        )
    }
}

/// Group normalization for trivial/regular field types.
///
/// Features are viewed as `(B, Y, C, H, W)` with `Y` the representation
/// dimension and `C` the number of fields. For every sample and every
/// `y`-slice, each group of `C / num_groups` fields is normalized over
/// (fields in group, H, W). A regular representation permutes the `y`-slices
/// and each slice carries its own statistics, so the layer commutes with the
/// action. The affine weight and bias are per field, shared across `Y`.
pub struct EquivGroupNorm {
    field: FieldType,
    num_groups: usize,
    affine: bool,
    plan: Arc<SetNorm>,
}

impl EquivGroupNorm {
    pub fn new(field: &FieldType, num_groups: usize, affine: bool, height: usize, width: usize) -> Result<Self> {
        if field.fields().iter().any(|(r, _)| matches!(r.kind(), RepKind::Irrep { .. })) {
            return Err(Error::IrrepFieldType);
        }
        let y = field.fields()[0].0.dim();
        if field.fields().iter().any(|(r, _)| r.dim() != y) {
            return Err(Error::MixedFieldType);
        }
        let c = field.num_fields();
        if num_groups == 0 || c % num_groups != 0 {
            return Err(Error::InvalidArgument(format!("{c} fields cannot form {num_groups} groups")));
        }
        let hw = height * width;
        let per = c / num_groups;
        let mut sets = Vec::with_capacity(y * num_groups);
        for yy in 0..y {
            for grp in 0..num_groups {
                let mut indices = Vec::with_capacity(per * hw);
                let mut weight = Vec::with_capacity(per * hw);
                for f in grp * per..(grp + 1) * per {
                    let ch = f * y + yy;
                    for p in 0..hw {
                        indices.push(ch * hw + p);
                        weight.push(f);
                    }
                }
                let bias = weight.iter().map(|&f| Some(f)).collect();
                sets.push(NormSet { indices, center: true, weight, bias });
            }
        }
        Ok(Self {
            field: field.clone(),
            num_groups,
            affine,
            plan: Arc::new(SetNorm { sets, num_weights: c, num_biases: c }),
        })
    }

    /// Default group count: the largest divisor of the field count not
    /// exceeding `min(8, fields)`.
    pub fn default_groups(num_fields: usize) -> usize {
        (1..=num_fields.min(8)).rev().find(|g| num_fields % g == 0).unwrap_or(1)
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn field(&self) -> &FieldType {
        &self.field
    }

    pub fn affine(&self) -> bool {
        self.affine
    }

    /// Number of weights (= biases) when affine.
    pub fn num_affine(&self) -> usize {
        self.field.num_fields()
    }

    pub fn apply(&self, g: &mut Graph, x: Var, weight: Option<Var>, bias: Option<Var>) -> Result<Var> {
        check_input(g, x, &self.field, self.plan.sets.iter().map(|s| s.indices.len()).sum())?;
        self.plan.clone().record(g, x, weight, bias)
    }
}

/// Instance normalization for SO(2) irrep field types.
///
/// Each irrep copy is normalized per sample: frequency-0 copies are
/// mean-centred over space (the Haar mean of a non-trivial irrep is zero, so
/// other copies are left unshifted), the scale `λ = mean_hw(‖z‖²) / d` is
/// estimated and the copy divided by `sqrt(λ + eps)`. A scalar weight per copy
/// commutes with the rotation; the bias is added to frequency-0 copies only.
pub struct IidInstanceNorm {
    field: FieldType,
    affine: bool,
    num_biases: usize,
    plan: Arc<SetNorm>,
}

impl IidInstanceNorm {
    pub fn new(field: &FieldType, affine: bool, height: usize, width: usize) -> Result<Self> {
        if field.group().is_finite() || field.fields().iter().any(|(r, _)| r.frequency().is_none()) {
            return Err(Error::NonIrrepFieldType);
        }
        let hw = height * width;
        let mut sets = Vec::new();
        let mut num_biases = 0;
        for (w, slot) in field.slots().iter().enumerate() {
            let trivial = slot.rep.is_trivial();
            let indices: Vec<usize> = slot.channels().flat_map(|c| (0..hw).map(move |p| c * hw + p)).collect();
            let bias = if trivial {
                num_biases += 1;
                vec![Some(num_biases - 1); indices.len()]
            } else {
                vec![None; indices.len()]
            };
            let weight = vec![w; indices.len()];
            sets.push(NormSet { indices, center: trivial, weight, bias });
        }
        let num_weights = sets.len();
        Ok(Self {
            field: field.clone(),
            affine,
            num_biases,
            plan: Arc::new(SetNorm { sets, num_weights, num_biases }),
        })
    }

    pub fn field(&self) -> &FieldType {
        &self.field
    }

    pub fn affine(&self) -> bool {
        self.affine
    }

    pub fn num_weights(&self) -> usize {
        self.plan.num_weights
    }

    pub fn num_biases(&self) -> usize {
        self.num_biases
    }

    pub fn apply(&self, g: &mut Graph, x: Var, weight: Option<Var>, bias: Option<Var>) -> Result<Var> {
        check_input(g, x, &self.field, self.plan.sets.iter().map(|s| s.indices.len()).sum())?;
        self.plan.clone().record(g, x, weight, bias)
    }
}

fn check_input(g: &Graph, x: Var, field: &FieldType, expected: usize) -> Result<()> {
    let s = g.item_shape(x);
    if !g.is_batched(x) || s.len() != 3 || s[0] != field.total_channels() || s.iter().product::<usize>() != expected {
        return Err(Error::ShapeMismatch(format!(
            "normalization built for {} channels over a fixed grid, got {:?}",
            field.total_channels(),
            g.value(x).shape()
        )));
    }
    Ok(())
}
