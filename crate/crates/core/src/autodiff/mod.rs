//! Reverse-mode differentiation with per-sample parameter gradients.
//!
//! Every node of a [`Graph`] is either *batched* (leading axis is the batch,
//! each slice depends on one sample only) or *unbatched* (parameters and
//! values derived from parameters alone). Gradients of batched nodes share
//! their shape. Gradients of unbatched nodes carry an extra leading batch
//! axis: slice `b` holds `∂ loss_b / ∂ node`. A single backward pass from the
//! per-sample loss vector therefore yields every per-sample parameter
//! gradient, and summing over the batch gives the aggregate gradient.

mod conv;
mod ops;

pub use conv::Padding;
pub use ops::softmax_rows;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct Ctx<'a> {
    /// Gradient with respect to the output, in the output's gradient layout.
    pub grad: &'a Tensor,
    pub output: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub batched: Vec<bool>,
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub needs: Vec<bool>,
    pub batch: usize,
}

pub type BackwardFn = Box<dyn Fn(&Ctx) -> Result<Vec<Option<Tensor>>> + Send + Sync>;

struct Node {
    value: Tensor,
    batched: bool,
    requires_grad: bool,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<usize>,
}

/// A single forward pass over one (micro-)batch.
pub struct Graph {
    nodes: Vec<Node>,
    batch: usize,
    round_f32: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a node in its gradient layout, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter id, per-sample gradient (B,)+shape)` for every parameter
    /// leaf, in creation order. Unreached parameters are absent.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.params.iter().filter_map(|&(pid, node)| self.grads[node].as_ref().map(|g| (pid, g)))
    }

    pub fn take_param(&mut self, pid: usize) -> Option<Tensor> {
        let node = self.params.iter().find(|(p, _)| *p == pid)?.1;
        self.grads[node].take()
    }
}

impl Graph {
    pub fn new(batch: usize) -> Self {
        Self { nodes: Vec::new(), batch, round_f32: false }
    }

    /// Rounds every forward value to `f32` precision.
    pub fn with_f32_rounding(mut self, on: bool) -> Self {
        self.round_f32 = on;
        self
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_batched(&self, v: Var) -> bool {
        self.nodes[v.0].batched
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Per-sample shape of a batched node, full shape of an unbatched one.
    pub fn item_shape(&self, v: Var) -> &[usize] {
        let n = &self.nodes[v.0];
        if n.batched {
            &n.value.shape()[1..]
        } else {
            n.value.shape()
        }
    }

    fn push_leaf(&mut self, mut value: Tensor, batched: bool, param: Option<usize>) -> Var {
        if self.round_f32 {
            value.round_f32();
        }
        self.nodes.push(Node {
            value,
            batched,
            requires_grad: param.is_some(),
            inputs: vec![],
            backward: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batched input data; does not require gradients.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.check_batch(&value)?;
        Ok(self.push_leaf(value, true, None))
    }

    /// Batched input for which gradients are tracked (used by input-gradient
    /// checks).
    pub fn input_with_grad(&mut self, value: Tensor) -> Result<Var> {
        self.check_batch(&value)?;
        let v = self.push_leaf(value, true, None);
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// Unbatched trainable leaf tagged with a parameter id.
    pub fn param(&mut self, value: Tensor, id: usize) -> Var {
        self.push_leaf(value, false, Some(id))
    }

    fn check_batch(&self, value: &Tensor) -> Result<()> {
        if value.shape().first() != Some(&self.batch) {
            return Err(Error::ShapeMismatch(format!(
                "batched value {:?} does not lead with batch {}",
                value.shape(),
                self.batch
            )));
        }
        Ok(())
    }

    /// Records a custom operation. The output is batched iff any input is.
    pub fn custom(&mut self, inputs: &[Var], mut value: Tensor, backward: BackwardFn) -> Result<Var> {
        if inputs.iter().any(|v| v.0 >= self.nodes.len()) {
            return Err(Error::NoTape);
        }
        let batched = inputs.iter().any(|v| self.nodes[v.0].batched);
        if batched {
            self.check_batch(&value)?;
        }
        if self.round_f32 {
            value.round_f32();
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            batched,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: requires_grad.then_some(backward),
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a batched per-sample loss vector of shape `(B,)`,
    /// seeding every sample with gradient one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_seeded(loss, Tensor::ones(&[self.batch]))
    }

    /// Backpropagates with an explicit seed in the loss node's gradient layout.
    pub fn backward_seeded(&self, loss: Var, seed: Tensor) -> Result<Gradients> {
        let root = self.nodes.get(loss.0).ok_or(Error::NoTape)?;
        let expected = grad_shape(root, self.batch);
        if seed.shape() != expected.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "seed {:?} for node gradient {:?}",
                seed.shape(),
                expected
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            let Some(g) = grads[i].take() else { continue };
            let ctx = Ctx {
                grad: &g,
                output: &node.value,
                inputs: node.inputs.iter().map(|&j| &self.nodes[j].value).collect(),
                batched: node.inputs.iter().map(|&j| self.nodes[j].batched).collect(),
                needs: node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect(),
                batch: self.batch,
            };
            let input_grads = backward(&ctx)?;
            for (k, (&j, ig)) in node.inputs.iter().zip(input_grads).enumerate() {
                let Some(ig) = ig else { continue };
                if !ctx.needs[k] {
                    continue;
                }
                let want = grad_shape(&self.nodes[j], self.batch);
                if ig.shape() != want.as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "backward rule produced {:?} for an input expecting {:?}",
                        ig.shape(),
                        want
                    )));
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot => *slot = Some(ig),
                }
            }
            // keep gradients of leaves only
            if node.param.is_none() && !node.inputs.is_empty() {
                grads[i] = None;
            } else {
                grads[i] = Some(g);
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn grad_shape(node: &Node, batch: usize) -> Vec<usize> {
    if node.batched {
        node.value.shape().to_vec()
    } else {
        std::iter::once(batch).chain(node.value.shape().iter().copied()).collect()
    }
}

/// Tiles an unbatched per-item tensor `v` so it lines up with a gradient of
/// `batch` copies, or returns it unchanged when already batched.
pub(crate) fn tiled(v: &Tensor, batched: bool, batch: usize) -> std::borrow::Cow<'_, [f64]> {
    if batched {
        std::borrow::Cow::Borrowed(v.data())
    } else {
        let mut out = Vec::with_capacity(v.len() * batch);
        for _ in 0..batch {
            out.extend_from_slice(v.data());
        }
        std::borrow::Cow::Owned(out)
    }
}

/// Central finite-difference check of `f` (a scalar function of a flat
/// parameter vector) against an analytic gradient. Tests `coords` (or all
/// coordinates when `None`) and returns the largest relative error, with
/// relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
    floor: f64,
) -> f64 {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    worst
}
