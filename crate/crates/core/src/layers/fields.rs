//! Nonlinearities and fixed linear maps between field types.

use nalgebra::DMatrix;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::groups::{fourier_pair_for, restrict, FieldType, RepKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Mish,
    /// Only used by tests of the Fourier round trip.
    Identity,
}

impl ActKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActKind::Relu => "relu",
            ActKind::Mish => "mish",
            ActKind::Identity => "identity",
        }
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            ActKind::Relu => g.relu(x),
            ActKind::Mish => g.mish(x),
            ActKind::Identity => Ok(x),
        }
    }
}

/// Elementwise activation; valid for fields acting by permutations.
pub fn pointwise_activation(g: &mut Graph, x: Var, field: &FieldType, kind: ActKind) -> Result<Var> {
    if !field.is_permutation_only() {
        return Err(Error::IrrepFieldType);
    }
    kind.apply(g, x)
}

/// Sampling and analysis matrices for a whole SO(2) field type, block
/// diagonal over its band-limited fields.
pub struct FourierActivation {
    field: FieldType,
    num_samples: usize,
    kind: ActKind,
    inverse: Vec<f64>,
    forward: Vec<f64>,
    sampled_channels: usize,
}

impl FourierActivation {
    pub fn new(field: &FieldType, num_samples: usize, kind: ActKind) -> Result<Self> {
        let block = field.fourier_block()?;
        let pair = fourier_pair_for(&block, num_samples)?;
        let d = pair.inverse.ncols();
        let nf = field.total_channels() / d;
        let (c, s) = (field.total_channels(), nf * num_samples);
        let mut inverse = vec![0.0; s * c];
        let mut forward = vec![0.0; c * s];
        for f in 0..nf {
            for a in 0..num_samples {
                for j in 0..d {
                    inverse[(f * num_samples + a) * c + f * d + j] = pair.inverse[(a, j)];
                    forward[(f * d + j) * s + f * num_samples + a] = pair.forward[(j, a)];
                }
            }
        }
        Ok(Self { field: field.clone(), num_samples, kind, inverse, forward, sampled_channels: s })
    }

    pub fn field(&self) -> &FieldType {
        &self.field
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn kind(&self) -> ActKind {
        self.kind
    }

    /// Inverse transform to group samples, pointwise activation, forward
    /// transform back to band-limited coefficients.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let samples = g.channel_map(x, &self.inverse, self.sampled_channels)?;
        let act = self.kind.apply(g, samples)?;
        g.channel_map(act, &self.forward, self.field.total_channels())
    }
}

/// Invariant projection: regular fields are averaged over their
/// representation dimension, trivial fields pass through.
pub struct GroupPool {
    field_in: FieldType,
    field_out: FieldType,
    matrix: Vec<f64>,
}

impl GroupPool {
    pub fn new(field_in: &FieldType) -> Result<Self> {
        let slots = field_in.slots();
        let c_in = field_in.total_channels();
        let mut matrix = vec![0.0; slots.len() * c_in];
        for (o, s) in slots.iter().enumerate() {
            match s.rep.kind() {
                RepKind::Trivial | RepKind::Regular | RepKind::Irrep { frequency: 0 } => {
                    for c in s.channels() {
                        matrix[o * c_in + c] = 1.0 / s.dim() as f64;
                    }
                }
                RepKind::Irrep { .. } => {
                    return Err(Error::UnsupportedRepresentation(
                        "group pooling of non-trivial SO(2) irreps; restrict first".into(),
                    ))
                }
            }
        }
        let field_out = FieldType::trivial(field_in.group(), slots.len())?;
        Ok(Self { field_in: field_in.clone(), field_out, matrix })
    }

    pub fn field_in(&self) -> &FieldType {
        &self.field_in
    }

    pub fn field_out(&self) -> &FieldType {
        &self.field_out
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.channel_map(x, &self.matrix, self.field_out.total_channels())
    }
}

/// Change of basis onto the subgroup's field type.
pub struct Restriction {
    field_in: FieldType,
    field_out: FieldType,
    basis: DMatrix<f64>,
    matrix: Vec<f64>,
}

impl Restriction {
    pub fn new(field_in: &FieldType) -> Result<Self> {
        let (field_out, basis) = restrict(field_in)?;
        let bt = basis.transpose();
        let matrix = (0..bt.nrows()).flat_map(|r| (0..bt.ncols()).map(move |c| (r, c))).map(|(r, c)| bt[(r, c)]).collect();
        Ok(Self { field_in: field_in.clone(), field_out, basis, matrix })
    }

    pub fn field_in(&self) -> &FieldType {
        &self.field_in
    }

    pub fn field_out(&self) -> &FieldType {
        &self.field_out
    }

    /// `B` with restricted features `Bᵀ x`.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.channel_map(x, &self.matrix, self.field_out.total_channels())
    }
}
