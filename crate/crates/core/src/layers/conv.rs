//! Equivariant convolution: basis expansion, weight standardization and the
//! planar convolution itself.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Ctx, Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::groups::FieldType;
use crate::steerable::{cached_kernel_basis, KernelBasis};
use crate::tensor::{gemm, gemm_tn, Tensor};

pub const STANDARDIZE_EPS: f64 = 1e-5;

/// Field pairs sharing one steerable basis. Expansion and its adjoint run as
/// a single GEMM over all members (and all samples, for the adjoint).
#[derive(Clone)]
struct BasisGroup {
    d_out: usize,
    d_in: usize,
    dim: usize,
    /// `kernel_len × dim`, row-major.
    matrix: Vec<f64>,
    /// Nonzero entries `(offset inside the full kernel relative to the
    /// member's corner, basis index, value)`, used when the basis is sparse.
    sparse: Option<Vec<(usize, usize, f64)>>,
    /// `(out_off, in_off, coeff_off)` per field pair.
    members: Vec<(usize, usize, usize)>,
}

/// How learned coefficients map onto a full `(C_out, C_in, k, k)` kernel: one
/// steerable basis per (output field, input field) pair.
#[derive(Clone)]
pub struct ExpandPlan {
    field_in: FieldType,
    field_out: FieldType,
    kernel_size: usize,
    groups: Vec<BasisGroup>,
    num_coefficients: usize,
    /// Fixed kernel added after expansion; only used to inject faults.
    offset: Option<Vec<f64>>,
}

impl ExpandPlan {
    pub fn new(field_in: &FieldType, field_out: &FieldType, kernel_size: usize) -> Result<Self> {
        if field_in.group() != field_out.group() {
            return Err(Error::RepresentationMismatch(format!(
                "convolution from {} to {}",
                field_in.group(),
                field_out.group()
            )));
        }
        let group = field_in.group();
        let mut groups: Vec<BasisGroup> = Vec::new();
        let mut index: HashMap<*const KernelBasis, usize> = HashMap::new();
        // keeps the bases alive so pointer keys stay unique
        let mut held: Vec<Arc<KernelBasis>> = Vec::new();
        let mut coeff_off = 0;
        for so in field_out.slots() {
            for si in field_in.slots() {
                let basis = cached_kernel_basis(&si.rep, &so.rep, &group, kernel_size)?;
                let dim = basis.dim();
                if dim == 0 {
                    continue;
                }
                let gi = *index.entry(Arc::as_ptr(&basis)).or_insert_with(|| {
                    let mut m = vec![0.0; basis.kernel_len() * dim];
                    for (e, b) in basis.elements().iter().enumerate() {
                        for (r, v) in b.iter().enumerate() {
                            m[r * dim + e] = *v;
                        }
                    }
                    let [d_out, d_in, _, _] = basis.shape();
                    let kk = kernel_size * kernel_size;
                    let c_in = field_in.total_channels();
                    let entries: Vec<(usize, usize, f64)> = m
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(idx, &v)| {
                            let (r, e) = (idx / dim, idx % dim);
                            let (o, i, p) = (r / (d_in * kk), (r / kk) % d_in, r % kk);
                            ((o * c_in + i) * kk + p, e, v)
                        })
                        .collect();
                    let sparse = (entries.len() * 4 < m.len()).then_some(entries);
                    groups.push(BasisGroup { d_out, d_in, dim, matrix: m, sparse, members: Vec::new() });
                    held.push(basis.clone());
                    groups.len() - 1
                });
                groups[gi].members.push((so.offset, si.offset, coeff_off));
                coeff_off += dim;
            }
        }
        if coeff_off == 0 {
            return Err(Error::EmptyBasis(format!("{field_in} -> {field_out}")));
        }
        Ok(Self {
            field_in: field_in.clone(),
            field_out: field_out.clone(),
            kernel_size,
            groups,
            num_coefficients: coeff_off,
            offset: None,
        })
    }

    /// Adds a fixed, generally non-equivariant kernel after expansion. Used
    /// to check that audits catch a broken layer.
    pub fn with_kernel_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        let [a, b, c, d] = self.kernel_shape();
        if offset.len() != a * b * c * d {
            return Err(Error::LengthMismatch { expected: a * b * c * d, got: offset.len() });
        }
        self.offset = Some(offset);
        Ok(self)
    }

    pub fn num_coefficients(&self) -> usize {
        self.num_coefficients
    }

    pub fn field_in(&self) -> &FieldType {
        &self.field_in
    }

    pub fn field_out(&self) -> &FieldType {
        &self.field_out
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        let k = self.kernel_size;
        [self.field_out.total_channels(), self.field_in.total_channels(), k, k]
    }

    /// Dense kernel for a coefficient vector.
    pub fn expand(&self, coefficients: &[f64]) -> Result<Vec<f64>> {
        if coefficients.len() != self.num_coefficients {
            return Err(Error::LengthMismatch { expected: self.num_coefficients, got: coefficients.len() });
        }
        let [c_out, c_in, k, _] = self.kernel_shape();
        let kk = k * k;
        let mut out = vec![0.0; c_out * c_in * kk];
        for g in &self.groups {
            if let Some(entries) = &g.sparse {
                for &(oo, io, off) in &g.members {
                    let base = (oo * c_in + io) * kk;
                    for &(rel, e, v) in entries {
                        out[base + rel] += v * coefficients[off + e];
                    }
                }
                continue;
            }
            let (nb, len) = (g.members.len(), g.d_out * g.d_in * kk);
            let mut coeff = vec![0.0; g.dim * nb];
            for (j, &(_, _, off)) in g.members.iter().enumerate() {
                for e in 0..g.dim {
                    coeff[e * nb + j] = coefficients[off + e];
                }
            }
            let mut local = vec![0.0; len * nb];
            gemm(len, g.dim, nb, &g.matrix, &coeff, &mut local, false);
            for (j, &(oo, io, _)) in g.members.iter().enumerate() {
                for o in 0..g.d_out {
                    for i in 0..g.d_in {
                        let dst = ((oo + o) * c_in + io + i) * kk;
                        for p in 0..kk {
                            out[dst + p] = local[((o * g.d_in + i) * kk + p) * nb + j];
                        }
                    }
                }
            }
        }
        if let Some(off) = &self.offset {
            out.iter_mut().zip(off).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }

    /// Adjoint of [`ExpandPlan::expand`] applied to `batch` stacked kernel
    /// gradients; returns `batch` stacked coefficient gradients.
    pub fn project_batch(&self, kernel_grads: &[f64], batch: usize) -> Vec<f64> {
        let [c_out, c_in, k, _] = self.kernel_shape();
        let (kk, klen, n) = (k * k, c_out * c_in * k * k, self.num_coefficients);
        let mut out = vec![0.0; batch * n];
        for g in &self.groups {
            if let Some(entries) = &g.sparse {
                for s in 0..batch {
                    let kg = &kernel_grads[s * klen..(s + 1) * klen];
                    let dst = &mut out[s * n..(s + 1) * n];
                    for &(oo, io, off) in &g.members {
                        let base = (oo * c_in + io) * kk;
                        for &(rel, e, v) in entries {
                            dst[off + e] += v * kg[base + rel];
                        }
                    }
                }
                continue;
            }
            let (nb, len) = (g.members.len(), g.d_out * g.d_in * kk);
            let cols = nb * batch;
            let mut local = vec![0.0; len * cols];
            for s in 0..batch {
                let kg = &kernel_grads[s * klen..(s + 1) * klen];
                for (j, &(oo, io, _)) in g.members.iter().enumerate() {
                    let c = s * nb + j;
                    for o in 0..g.d_out {
                        for i in 0..g.d_in {
                            let src = ((oo + o) * c_in + io + i) * kk;
                            for p in 0..kk {
                                local[((o * g.d_in + i) * kk + p) * cols + c] = kg[src + p];
                            }
                        }
                    }
                }
            }
            let mut coeff = vec![0.0; g.dim * cols];
            gemm_tn(g.dim, len, cols, &g.matrix, &local, &mut coeff, false);
            for s in 0..batch {
                for (j, &(_, _, off)) in g.members.iter().enumerate() {
                    for e in 0..g.dim {
                        out[s * n + off + e] = coeff[e * cols + s * nb + j];
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ExpandPlan::expand`].
    pub fn project(&self, kernel_grad: &[f64]) -> Vec<f64> {
        self.project_batch(kernel_grad, 1)
    }
}

/// Records the coefficient-to-kernel expansion on the tape.
pub fn expand_kernel(g: &mut Graph, plan: Arc<ExpandPlan>, coefficients: Var) -> Result<Var> {
    let kernel = plan.expand(g.value(coefficients).data())?;
    let value = Tensor::new(&plan.kernel_shape(), kernel)?;
    g.custom(
        &[coefficients],
        value,
        Box::new(move |ctx: &Ctx| {
            let d = plan.project_batch(ctx.grad.data(), ctx.batch);
            Ok(vec![Some(Tensor::new(&[ctx.batch, plan.num_coefficients], d)?)])
        }),
    )
}

/// Entry sets used by weight standardization: for each output field, the
/// flat kernel indices it owns and which of them are mean-centred.
struct StandardizeSets {
    sets: Vec<(Vec<usize>, Vec<bool>)>,
}

impl StandardizeSets {
    fn new(field_in: &FieldType, field_out: &FieldType, k: usize) -> Self {
        let c_in = field_in.total_channels();
        let kk = k * k;
        let in_perm: Vec<bool> = field_in
            .slots()
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.rep.is_permutation(), s.dim()))
            .collect();
        let sets = field_out
            .slots()
            .iter()
            .map(|so| {
                let mut idx = Vec::new();
                let mut center = Vec::new();
                for o in so.channels() {
                    for (i, &perm) in in_perm.iter().enumerate() {
                        for p in 0..kk {
                            idx.push((o * c_in + i) * kk + p);
                            center.push(perm && so.rep.is_permutation());
                        }
                    }
                }
                (idx, center)
            })
            .collect();
        Self { sets }
    }
}

/// Standardizes a `(C_out, C_in, k, k)` kernel per output field. Entries
/// coupling two permutation representations are mean-centred (the mean is
/// invariant under the permutation action); every entry of the field is then
/// divided by `sqrt(mean(c²) + eps)`, which commutes with any orthogonal
/// action.
pub fn weight_standardize(kernel: &[f64], field_in: &FieldType, field_out: &FieldType, k: usize) -> Vec<f64> {
    let sets = StandardizeSets::new(field_in, field_out, k);
    standardize_forward(kernel, &sets).0
}

fn standardize_forward(kernel: &[f64], sets: &StandardizeSets) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; kernel.len()];
    let mut scales = Vec::with_capacity(sets.sets.len());
    for (idx, center) in &sets.sets {
        let n_c = center.iter().filter(|c| **c).count();
        let mean = if n_c > 0 {
            idx.iter().zip(center).filter(|(_, c)| **c).map(|(&i, _)| kernel[i]).sum::<f64>() / n_c as f64
        } else {
            0.0
        };
        let centred: Vec<f64> =
            idx.iter().zip(center).map(|(&i, &c)| kernel[i] - if c { mean } else { 0.0 }).collect();
        let var = centred.iter().map(|v| v * v).sum::<f64>() / idx.len() as f64;
        let s = (var + STANDARDIZE_EPS).sqrt();
        for (&i, v) in idx.iter().zip(&centred) {
            out[i] = v / s;
        }
        scales.push(s);
    }
    (out, scales)
}

/// Records weight standardization on the tape.
pub fn standardize_kernel(g: &mut Graph, field_in: &FieldType, field_out: &FieldType, kernel: Var) -> Result<Var> {
    let shape = g.value(kernel).shape().to_vec();
    if shape.len() != 4 || shape[0] != field_out.total_channels() || shape[1] != field_in.total_channels() {
        return Err(Error::ShapeMismatch(format!("kernel {shape:?} for {field_in} -> {field_out}")));
    }
    let sets = StandardizeSets::new(field_in, field_out, shape[2]);
    let (out, scales) = standardize_forward(g.value(kernel).data(), &sets);
    let value = Tensor::new(&shape, out)?;
    g.custom(
        &[kernel],
        value,
        Box::new(move |ctx: &Ctx| {
            let y = ctx.output.data();
            let n = y.len();
            let mut d = vec![0.0; ctx.batch * n];
            let counts: Vec<usize> = sets.sets.iter().map(|(_, c)| c.iter().filter(|c| **c).count()).collect();
            let mut dc = Vec::new();
            for (dst, gs) in d.chunks_mut(n).zip(ctx.grad.data().chunks(n)) {
                for (((idx, center), &sc), &n_c) in sets.sets.iter().zip(&scales).zip(&counts) {
                    let m = idx.len() as f64;
                    let gy = idx.iter().map(|&i| gs[i] * y[i]).sum::<f64>() / m;
                    dc.clear();
                    dc.extend(idx.iter().map(|&i| (gs[i] - y[i] * gy) / sc));
                    let mean_dc = if n_c > 0 {
                        dc.iter().zip(center).filter(|(_, c)| **c).map(|(v, _)| v).sum::<f64>() / n_c as f64
                    } else {
                        0.0
                    };
                    for ((&i, v), &c) in idx.iter().zip(&dc).zip(center) {
                        dst[i] = v - if c { mean_dc } else { 0.0 };
                    }
                }
            }
            Ok(vec![Some(Tensor::new(&[ctx.batch, shape[0], shape[1], shape[2], shape[3]], d)?)])
        }),
    )
}

/// Expands, optionally standardizes, and convolves.
pub fn equiv_conv(
    g: &mut Graph,
    plan: &Arc<ExpandPlan>,
    coefficients: Var,
    x: Var,
    padding: Padding,
    standardize: bool,
) -> Result<Var> {
    let c_in = plan.field_in.total_channels();
    if g.item_shape(x).first() != Some(&c_in) {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} for a convolution expecting {c_in} channels",
            g.value(x).shape()
        )));
    }
    let mut kernel = expand_kernel(g, plan.clone(), coefficients)?;
    if standardize {
        kernel = standardize_kernel(g, &plan.field_in, &plan.field_out, kernel)?;
    }
    g.conv2d(x, kernel, padding)
}
