//! Equivariant layers, parameter storage and the Equivariant-ResNet-9 model.

mod conv;
mod fields;
mod norm;
mod resnet;
mod transform;

use std::sync::Arc;

pub use conv::{equiv_conv, expand_kernel, standardize_kernel, weight_standardize, ExpandPlan, STANDARDIZE_EPS};
pub use fields::{pointwise_activation, ActKind, FourierActivation, GroupPool, Restriction};
pub use norm::{EquivGroupNorm, IidInstanceNorm, NORM_EPS};
pub use resnet::{build_eq_resnet9, field_count, HeadPool, ResNetConfig, REFERENCE_WIDTHS};
pub use transform::{
    check_equivariance, relative_max_error, transform_features, ElementCheck, EquivarianceReport, LayerCheck,
};

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::groups::{FieldType, GroupSpec};
use crate::tensor::Tensor;

/// A trainable array with its gradients.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Aggregate gradient (sum over the batch).
    pub grad: Option<Tensor>,
    /// `(B,) + shape` per-sample gradients.
    pub per_sample_grad: Option<Tensor>,
}

/// Parameters in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.params.push(Parameter { name: name.into(), value, grad: None, per_sample_grad: None });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Parameter {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All values concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Overwrites all values from a flat vector in registration order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.count() {
            return Err(Error::LengthMismatch { expected: self.count(), got: flat.len() });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Stores per-sample and aggregate gradients from a backward pass.
    pub fn fill_grads(&mut self, grads: &crate::autodiff::Gradients, batch: usize) {
        for p in &mut self.params {
            p.grad = None;
            p.per_sample_grad = None;
        }
        for (pid, g) in grads.params() {
            let p = &mut self.params[pid];
            p.grad = Some(Graph::aggregate(g));
            p.per_sample_grad = Some(g.clone());
        }
        // unreached parameters get explicit zeros
        for p in &mut self.params {
            if p.per_sample_grad.is_none() {
                let shape: Vec<usize> = std::iter::once(batch).chain(p.value.shape().iter().copied()).collect();
                p.per_sample_grad = Some(Tensor::zeros(&shape));
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Per-sample gradients flattened: `B` rows of `count()` entries.
    pub fn per_sample_flat(&self, batch: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = vec![Vec::with_capacity(self.count()); batch];
        for p in &self.params {
            let g = p.per_sample_grad.as_ref().ok_or(Error::NoTape)?;
            let n = p.value.len();
            for (b, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(&g.data()[b * n..(b + 1) * n]);
            }
        }
        Ok(rows)
    }
}

/// Lazily materialized parameter leaves of one graph.
pub struct ParamVars<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> ParamVars<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()] }
    }

    pub fn get(&mut self, g: &mut Graph, id: usize) -> Var {
        *self.vars[id].get_or_insert_with(|| g.param(self.store.get(id).value.clone(), id))
    }
}

pub enum Layer {
    Conv { plan: Arc<ExpandPlan>, coefficients: usize, standardize: bool },
    GroupNorm { norm: EquivGroupNorm, weight: Option<usize>, bias: Option<usize> },
    IidNorm { norm: IidInstanceNorm, weight: Option<usize>, bias: Option<usize> },
    Activation { kind: ActKind },
    FourierAct(FourierActivation),
    MaxPool(usize),
    AvgPool(usize),
    GroupPool(GroupPool),
    Restrict(Restriction),
    GlobalAvgPool,
    GlobalMaxPool,
    Linear { weight: usize, bias: usize },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "equiv_conv",
            Layer::GroupNorm { .. } => "equiv_group_norm",
            Layer::IidNorm { .. } => "iid_instance_norm",
            Layer::Activation { .. } => "pointwise_act",
            Layer::FourierAct(_) => "fourier_act",
            Layer::MaxPool(_) => "max_pool",
            Layer::AvgPool(_) => "avg_pool",
            Layer::GroupPool(_) => "group_pool",
            Layer::Restrict(_) => "restriction",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::GlobalMaxPool => "global_max_pool",
            Layer::Linear { .. } => "linear",
        }
    }
}

/// A layer with its declared input and output field types. After global
/// pooling features are plain invariant vectors, still described by trivial
/// field types.
pub struct LayerNode {
    pub name: String,
    pub layer: Layer,
    pub field_in: FieldType,
    pub field_out: FieldType,
}

pub enum Block {
    Layer(LayerNode),
    /// `x + f(x)` with `f` the listed layers.
    Residual { name: String, layers: Vec<LayerNode> },
}

/// One recorded intermediate feature.
pub struct TraceEntry {
    pub name: String,
    pub kind: &'static str,
    pub var: Var,
    pub input: Var,
    pub field: FieldType,
    /// Index of the producing layer in [`Model::layers`], if any.
    pub layer: Option<usize>,
}

/// Layer graph plus its parameters.
pub struct Model {
    pub group: GroupSpec,
    pub num_classes: usize,
    pub image_size: usize,
    pub padding: Padding,
    pub blocks: Vec<Block>,
    pub params: ParamStore,
    pub manifest: Vec<String>,
}

impl Model {
    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// All layers in execution order.
    pub fn layers(&self) -> Vec<&LayerNode> {
        self.blocks
            .iter()
            .flat_map(|b| match b {
                Block::Layer(l) => vec![l],
                Block::Residual { layers, .. } => layers.iter().collect(),
            })
            .collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerNode> {
        self.blocks
            .iter_mut()
            .flat_map(|b| match b {
                Block::Layer(l) => vec![l],
                Block::Residual { layers, .. } => layers.iter_mut().collect(),
            })
            .collect()
    }

    pub fn input_field(&self) -> &FieldType {
        &self.layers()[0].field_in
    }

    /// Applies one layer.
    pub fn apply_layer(&self, node: &LayerNode, g: &mut Graph, pv: &mut ParamVars, x: Var) -> Result<Var> {
        match &node.layer {
            Layer::Conv { plan, coefficients, standardize } => {
                let c = pv.get(g, *coefficients);
                equiv_conv(g, plan, c, x, self.padding, *standardize)
            }
            Layer::GroupNorm { norm, weight, bias } => {
                let (w, b) = (weight.map(|i| pv.get(g, i)), bias.map(|i| pv.get(g, i)));
                norm.apply(g, x, w, b)
            }
            Layer::IidNorm { norm, weight, bias } => {
                let (w, b) = (weight.map(|i| pv.get(g, i)), bias.map(|i| pv.get(g, i)));
                norm.apply(g, x, w, b)
            }
            Layer::Activation { kind } => pointwise_activation(g, x, &node.field_in, *kind),
            Layer::FourierAct(f) => f.apply(g, x),
            Layer::MaxPool(w) => g.max_pool2d(x, *w),
            Layer::AvgPool(w) => g.avg_pool2d(x, *w),
            Layer::GroupPool(p) => p.apply(g, x),
            Layer::Restrict(r) => r.apply(g, x),
            Layer::GlobalAvgPool => g.global_avg_pool(x),
            Layer::GlobalMaxPool => g.global_max_pool(x),
            Layer::Linear { weight, bias } => {
                let (w, b) = (pv.get(g, *weight), pv.get(g, *bias));
                g.linear(x, w, b)
            }
        }
    }

    /// Logits `(B, num_classes)` for a batched image tensor.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut pv = ParamVars::new(&self.params);
        self.run(g, &mut pv, x, None)
    }

    /// Forward pass recording every intermediate feature.
    pub fn forward_trace(&self, g: &mut Graph, x: Var) -> Result<(Var, Vec<TraceEntry>)> {
        let mut pv = ParamVars::new(&self.params);
        let mut trace = Vec::new();
        let out = self.run(g, &mut pv, x, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(&self, g: &mut Graph, pv: &mut ParamVars, x: Var, mut trace: Option<&mut Vec<TraceEntry>>) -> Result<Var> {
        let mut h = x;
        let mut idx = 0;
        for block in &self.blocks {
            match block {
                Block::Layer(node) => {
                    let input = h;
                    h = self.apply_layer(node, g, pv, h)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(entry(node, input, h, Some(idx)));
                    }
                    idx += 1;
                }
                Block::Residual { name, layers } => {
                    let skip = h;
                    let mut r = h;
                    for node in layers {
                        let input = r;
                        r = self.apply_layer(node, g, pv, r)?;
                        if let Some(t) = trace.as_deref_mut() {
                            t.push(entry(node, input, r, Some(idx)));
                        }
                        idx += 1;
                    }
                    h = g.add(skip, r)?;
                    if let Some(t) = trace.as_deref_mut() {
                        let field = layers.last().expect("non-empty residual").field_out.clone();
                        t.push(TraceEntry { name: name.clone(), kind: "residual", var: h, input: skip, field, layer: None });
                    }
                }
            }
        }
        Ok(h)
    }

    /// Per-sample losses for a batch of images and labels.
    pub fn loss(&self, g: &mut Graph, images: Tensor, labels: &[usize]) -> Result<Var> {
        let x = g.input(images)?;
        let logits = self.forward(g, x)?;
        g.softmax_cross_entropy(logits, labels)
    }

    /// Checks structural invariants: consecutive field types match, residual
    /// blocks preserve their type, one classifier head, invariant features
    /// before the head.
    pub fn validate(&self) -> Result<()> {
        let layers = self.layers();
        for w in layers.windows(2) {
            if w[0].field_out != w[1].field_in {
                return Err(Error::RepresentationMismatch(format!(
                    "{} outputs {} but {} expects {}",
                    w[0].name, w[0].field_out, w[1].name, w[1].field_in
                )));
            }
        }
        for b in &self.blocks {
            if let Block::Residual { name, layers } = b {
                if layers.first().map(|l| &l.field_in) != layers.last().map(|l| &l.field_out) {
                    return Err(Error::RepresentationMismatch(format!("residual block {name} changes its field type")));
                }
            }
        }
        let heads: Vec<_> = layers.iter().filter(|l| matches!(l.layer, Layer::Linear { .. })).collect();
        if heads.len() != 1 {
            return Err(Error::InvalidArgument(format!("expected one classifier head, found {}", heads.len())));
        }
        if !heads[0].field_in.is_trivial_only() {
            return Err(Error::RepresentationMismatch("features entering the head are not invariant".into()));
        }
        Ok(())
    }
}

fn entry(node: &LayerNode, input: Var, var: Var, layer: Option<usize>) -> TraceEntry {
    TraceEntry {
        name: node.name.clone(),
        kind: node.layer.kind_name(),
        var,
        input,
        field: node.field_out.clone(),
        layer,
    }
}
