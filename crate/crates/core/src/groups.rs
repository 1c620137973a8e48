//! Planar symmetry groups, their representations and field types.
//!
//! Three families are supported: the cyclic rotation groups `C_N`, the
//! dihedral groups `D_N` (rotations plus a reflection across the x-axis) and
//! the continuous rotation group `SO(2)` truncated at a band limit.
//!
//! Group elements are stored geometrically, as a rotation angle plus a
//! reflection flag, so the same [`GroupElement`] value denotes the same planar
//! transformation in a group and in any of its subgroups.
//!
//! Dihedral elements compose as `(r^a s^e)(r^b s^d) = r^(a + (-1)^e b) s^(e xor d)`
//! and the regular representation of `D_N` indexes its basis by
//! `(rotation_k, reflect)` in lexicographic order, i.e. `2k + reflect`.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const ANGLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Cyclic,
    Dihedral,
    So2,
}

/// A symmetry group acting on the plane.
///
/// `rotation_order` is ignored (stored as 1) for `SO(2)`; `max_frequency` is
/// ignored (stored as 0) for the finite groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupSpec {
    pub kind: GroupKind,
    pub rotation_order: u32,
    pub max_frequency: u32,
}

impl GroupSpec {
    pub fn new(kind: GroupKind, rotation_order: u32, max_frequency: u32) -> Result<Self> {
        match kind {
            GroupKind::So2 => Ok(Self { kind, rotation_order: 1, max_frequency }),
            _ if rotation_order == 0 => {
                Err(Error::InvalidGroup("rotation order must be at least 1".into()))
            }
            _ => Ok(Self { kind, rotation_order, max_frequency: 0 }),
        }
    }

    pub fn cyclic(n: u32) -> Result<Self> {
        Self::new(GroupKind::Cyclic, n, 0)
    }

    pub fn dihedral(n: u32) -> Result<Self> {
        Self::new(GroupKind::Dihedral, n, 0)
    }

    pub fn so2(max_frequency: u32) -> Self {
        Self { kind: GroupKind::So2, rotation_order: 1, max_frequency }
    }

    /// The trivial group `{e}`, represented as `C_1`.
    pub fn trivial() -> Self {
        Self { kind: GroupKind::Cyclic, rotation_order: 1, max_frequency: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.kind != GroupKind::So2
    }

    pub fn is_trivial(&self) -> bool {
        self.kind == GroupKind::Cyclic && self.rotation_order == 1
    }

    /// `|G|` for finite groups, `None` for `SO(2)`.
    pub fn order(&self) -> Option<usize> {
        match self.kind {
            GroupKind::Cyclic => Some(self.rotation_order as usize),
            GroupKind::Dihedral => Some(2 * self.rotation_order as usize),
            GroupKind::So2 => None,
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement::IDENTITY
    }

    /// All elements of a finite group, in regular-representation index order.
    pub fn elements(&self) -> Result<Vec<GroupElement>> {
        let n = self.rotation_order;
        match self.kind {
            GroupKind::Cyclic => Ok((0..n).map(|k| GroupElement::rotation_step(k, n)).collect()),
            GroupKind::Dihedral => Ok((0..n)
                .flat_map(|k| {
                    [false, true].into_iter().map(move |reflect| GroupElement {
                        rotation_angle: GroupElement::rotation_step(k, n).rotation_angle,
                        reflect,
                    })
                })
                .collect()),
            GroupKind::So2 => Err(Error::ContinuousGroup),
        }
    }

    /// Generators of a finite group: `r`, plus `s` for dihedral groups.
    pub fn generators(&self) -> Result<Vec<GroupElement>> {
        let r = GroupElement::rotation_step(1 % self.rotation_order, self.rotation_order);
        match self.kind {
            GroupKind::Cyclic => Ok(vec![r]),
            GroupKind::Dihedral => Ok(vec![r, GroupElement::REFLECTION]),
            GroupKind::So2 => Err(Error::ContinuousGroup),
        }
    }

    /// Rotation index `k` of an element of a finite group, if it belongs.
    fn rotation_index(&self, g: &GroupElement) -> Option<u32> {
        let n = self.rotation_order as f64;
        let steps = g.rotation_angle * n / TAU;
        let k = steps.round();
        if (steps - k).abs() > ANGLE_TOL * n.max(1.0) {
            return None;
        }
        Some((k as i64).rem_euclid(self.rotation_order as i64) as u32)
    }

    pub fn contains(&self, g: &GroupElement) -> bool {
        match self.kind {
            GroupKind::So2 => !g.reflect,
            GroupKind::Cyclic => !g.reflect && self.rotation_index(g).is_some(),
            GroupKind::Dihedral => self.rotation_index(g).is_some(),
        }
    }

    /// Regular-representation index of `g`.
    pub fn element_index(&self, g: &GroupElement) -> Result<usize> {
        if !self.contains(g) || !self.is_finite() {
            return Err(self.mismatch(g));
        }
        let k = self.rotation_index(g).expect("checked by contains") as usize;
        Ok(match self.kind {
            GroupKind::Dihedral => 2 * k + g.reflect as usize,
            _ => k,
        })
    }

    pub fn compose(&self, a: &GroupElement, b: &GroupElement) -> Result<GroupElement> {
        if !self.contains(a) {
            return Err(self.mismatch(a));
        }
        if !self.contains(b) {
            return Err(self.mismatch(b));
        }
        match self.kind {
            GroupKind::So2 => Ok(GroupElement::rotation(a.rotation_angle + b.rotation_angle)),
            _ => {
                let n = self.rotation_order as i64;
                let ka = self.rotation_index(a).unwrap() as i64;
                let kb = self.rotation_index(b).unwrap() as i64;
                let k = if a.reflect { ka - kb } else { ka + kb };
                Ok(GroupElement {
                    rotation_angle: GroupElement::rotation_step(k.rem_euclid(n) as u32, n as u32)
                        .rotation_angle,
                    reflect: a.reflect ^ b.reflect,
                })
            }
        }
    }

    pub fn inverse(&self, g: &GroupElement) -> Result<GroupElement> {
        if !self.contains(g) {
            return Err(self.mismatch(g));
        }
        if g.reflect {
            return Ok(*g);
        }
        match self.kind {
            GroupKind::So2 => Ok(GroupElement::rotation(-g.rotation_angle)),
            _ => {
                let n = self.rotation_order;
                let k = self.rotation_index(g).unwrap();
                Ok(GroupElement::rotation_step((n - k) % n, n))
            }
        }
    }

    /// Elements whose action maps the pixel grid onto itself (multiples of a
    /// quarter turn, optionally reflected). For `SO(2)` these are the four
    /// quarter-turn rotations.
    pub fn exact_steering_elements(&self) -> Vec<GroupElement> {
        match self.kind {
            GroupKind::So2 => (0..4).map(|k| GroupElement::rotation_step(k, 4)).collect(),
            _ => self
                .elements()
                .expect("finite group")
                .into_iter()
                .filter(GroupElement::is_exact)
                .collect(),
        }
    }

    /// True when every element acts exactly on the pixel grid.
    pub fn is_exact_steering(&self) -> bool {
        self.is_finite() && 4 % self.rotation_order == 0
    }

    /// The subgroup used when restricting the last residual stage:
    /// `C_N -> C_{N/2}`, `D_N -> D_{N/2}`, `SO(2) -> SO(2)` (with the field
    /// itself reduced to its invariant part).
    pub fn restriction_subgroup(&self) -> Result<GroupSpec> {
        match self.kind {
            GroupKind::So2 => Ok(*self),
            _ if self.rotation_order % 2 == 1 => Err(Error::OddRotationOrder(self.rotation_order)),
            _ => GroupSpec::new(self.kind, self.rotation_order / 2, 0),
        }
    }

    fn mismatch(&self, g: &GroupElement) -> Error {
        Error::ElementGroupMismatch(g.to_string(), self.to_string())
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            GroupKind::Cyclic if self.rotation_order == 1 => write!(f, "{{e}}"),
            GroupKind::Cyclic => write!(f, "C{}", self.rotation_order),
            GroupKind::Dihedral => write!(f, "D{}", self.rotation_order),
            GroupKind::So2 => write!(f, "SO2(L={})", self.max_frequency),
        }
    }
}

/// A planar rotation (angle in `[0, 2π)`) optionally preceded by a reflection
/// across the x-axis: `g = Rot(angle) · Ref^reflect`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupElement {
    pub rotation_angle: f64,
    pub reflect: bool,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement { rotation_angle: 0.0, reflect: false };
    pub const REFLECTION: GroupElement = GroupElement { rotation_angle: 0.0, reflect: true };

    pub fn rotation(angle: f64) -> Self {
        let mut a = angle.rem_euclid(TAU);
        if TAU - a < 1e-12 {
            a = 0.0;
        }
        Self { rotation_angle: a, reflect: false }
    }

    /// Rotation by `2πk/n`.
    pub fn rotation_step(k: u32, n: u32) -> Self {
        Self::rotation(TAU * (k % n) as f64 / n as f64)
    }

    pub fn reflected(mut self) -> Self {
        self.reflect = !self.reflect;
        self
    }

    /// Number of quarter turns if the rotation is a multiple of 90°.
    pub fn quarter_turns(&self) -> Option<u32> {
        let q = self.rotation_angle / FRAC_PI_2;
        let r = q.round();
        ((q - r).abs() < ANGLE_TOL).then(|| (r as i64).rem_euclid(4) as u32)
    }

    pub fn is_exact(&self) -> bool {
        self.quarter_turns().is_some()
    }

    /// Linear action on Cartesian coordinates `(x, y)`.
    pub fn spatial_matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation_angle.sin_cos();
        let m = if self.reflect { -1.0 } else { 1.0 };
        [[c, -s * m], [s, c * m]]
    }

    /// Exact integer action for grid-preserving elements.
    pub fn apply_exact(&self, x: i64, y: i64) -> Option<(i64, i64)> {
        let q = self.quarter_turns()?;
        let (mut x, mut y) = (x, if self.reflect { -y } else { y });
        for _ in 0..q {
            (x, y) = (-y, x);
        }
        Some((x, y))
    }

    /// Exact integer action of the inverse element.
    pub fn apply_exact_inverse(&self, x: i64, y: i64) -> Option<(i64, i64)> {
        let q = self.quarter_turns()?;
        let (mut x, mut y) = (x, y);
        for _ in 0..q {
            (x, y) = (y, -x);
        }
        Some((x, if self.reflect { -y } else { y }))
    }

    /// Continuous action of the inverse element.
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation_angle.sin_cos();
        let (xr, yr) = (c * x + s * y, -s * x + c * y);
        (xr, if self.reflect { -yr } else { yr })
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rot({:.4}){}", self.rotation_angle, if self.reflect { "·s" } else { "" })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepKind {
    Trivial,
    Regular,
    Irrep { frequency: u32 },
}

/// An orthogonal representation of a [`GroupSpec`]. Matrices of finite groups
/// are computed once at construction.
#[derive(Clone)]
pub struct Representation {
    group: GroupSpec,
    kind: RepKind,
    cache: Option<Arc<Vec<DMatrix<f64>>>>,
}

impl Representation {
    pub fn trivial(group: GroupSpec) -> Self {
        Self::build(group, RepKind::Trivial).expect("trivial representation always exists")
    }

    pub fn regular(group: GroupSpec) -> Result<Self> {
        if !group.is_finite() {
            return Err(Error::UnsupportedRepresentation(
                "regular representation of a continuous group".into(),
            ));
        }
        Self::build(group, RepKind::Regular)
    }

    pub fn irrep(group: GroupSpec, frequency: u32) -> Result<Self> {
        if group.is_finite() {
            return Err(Error::UnsupportedRepresentation(
                "irreducible representations are only provided for SO(2)".into(),
            ));
        }
        Self::build(group, RepKind::Irrep { frequency })
    }

    pub fn new(group: GroupSpec, kind: RepKind) -> Result<Self> {
        match kind {
            RepKind::Trivial => Ok(Self::trivial(group)),
            RepKind::Regular => Self::regular(group),
            RepKind::Irrep { frequency } => Self::irrep(group, frequency),
        }
    }

    fn build(group: GroupSpec, kind: RepKind) -> Result<Self> {
        let mut rep = Self { group, kind, cache: None };
        if group.is_finite() {
            let mats = group
                .elements()?
                .iter()
                .map(|g| rep.compute_matrix(g))
                .collect::<Result<Vec<_>>>()?;
            rep.cache = Some(Arc::new(mats));
        }
        Ok(rep)
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn kind(&self) -> RepKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            RepKind::Trivial => 1,
            RepKind::Regular => self.group.order().expect("regular rep of finite group"),
            RepKind::Irrep { frequency: 0 } => 1,
            RepKind::Irrep { .. } => 2,
        }
    }

    /// Trivial, or the frequency-0 irrep.
    pub fn is_trivial(&self) -> bool {
        matches!(self.kind, RepKind::Trivial | RepKind::Irrep { frequency: 0 })
    }

    /// Acts by permutation matrices (trivial or regular).
    pub fn is_permutation(&self) -> bool {
        matches!(self.kind, RepKind::Trivial | RepKind::Regular)
    }

    pub fn frequency(&self) -> Option<u32> {
        match self.kind {
            RepKind::Irrep { frequency } => Some(frequency),
            RepKind::Trivial => Some(0),
            RepKind::Regular => None,
        }
    }

    /// `ρ(g)`.
    pub fn matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        if !self.group.contains(g) {
            return Err(Error::ElementGroupMismatch(g.to_string(), self.group.to_string()));
        }
        match &self.cache {
            Some(cache) => Ok(cache[self.group.element_index(g)?].clone()),
            None => self.compute_matrix(g),
        }
    }

    fn compute_matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        Ok(match self.kind {
            RepKind::Trivial => DMatrix::from_element(1, 1, 1.0),
            RepKind::Irrep { frequency: 0 } => DMatrix::from_element(1, 1, 1.0),
            RepKind::Irrep { frequency } => {
                let (s, c) = (frequency as f64 * g.rotation_angle).sin_cos();
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            }
            RepKind::Regular => {
                let elems = self.group.elements()?;
                let n = elems.len();
                let mut m = DMatrix::zeros(n, n);
                for (j, h) in elems.iter().enumerate() {
                    let gh = self.group.compose(g, h)?;
                    m[(self.group.element_index(&gh)?, j)] = 1.0;
                }
                m
            }
        })
    }

    /// `E_{g∈G}[ρ(g)]` under the normalized Haar measure.
    pub fn haar_mean_projector(&self) -> DMatrix<f64> {
        let d = self.dim();
        match &self.cache {
            Some(cache) => {
                let mut acc = DMatrix::zeros(d, d);
                for m in cache.iter() {
                    acc += m;
                }
                acc / cache.len() as f64
            }
            None if self.is_trivial() => DMatrix::identity(d, d),
            // Orthogonality of SO(2) irreps: non-trivial ones average to zero.
            None => DMatrix::zeros(d, d),
        }
    }
}

impl PartialEq for Representation {
    fn eq(&self, other: &Self) -> bool {
        self.group == other.group && self.kind == other.kind
    }
}

impl Eq for Representation {}

impl Hash for Representation {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.group.hash(state);
        self.kind.hash(state);
    }
}

impl fmt::Debug for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self)
    }
}

impl fmt::Display for Representation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            RepKind::Trivial => write!(f, "trivial"),
            RepKind::Regular => write!(f, "regular"),
            RepKind::Irrep { frequency } => write!(f, "irrep{frequency}"),
        }
    }
}

/// One copy of a representation inside a field type, with its channel offset.
#[derive(Debug, Clone)]
pub struct FieldSlot {
    pub offset: usize,
    pub rep: Representation,
}

impl FieldSlot {
    pub fn dim(&self) -> usize {
        self.rep.dim()
    }

    pub fn channels(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rep.dim()
    }
}

/// The transformation law of a feature space: an ordered list of
/// `(representation, multiplicity)` entries whose copies occupy consecutive
/// channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldType {
    group: GroupSpec,
    fields: Vec<(Representation, usize)>,
}

impl FieldType {
    pub fn new(group: GroupSpec, fields: Vec<(Representation, usize)>) -> Result<Self> {
        if let Some((rep, _)) = fields.iter().find(|(r, _)| r.group() != group) {
            return Err(Error::RepresentationMismatch(format!(
                "{rep} of {} in a field type over {group}",
                rep.group()
            )));
        }
        let fields: Vec<_> = fields.into_iter().filter(|(_, m)| *m > 0).collect();
        let ft = Self { group, fields };
        if ft.total_channels() == 0 {
            return Err(Error::ShapeMismatch("field type has no channels".into()));
        }
        Ok(ft)
    }

    pub fn trivial(group: GroupSpec, n: usize) -> Result<Self> {
        Self::new(group, vec![(Representation::trivial(group), n)])
    }

    pub fn regular(group: GroupSpec, n: usize) -> Result<Self> {
        Self::new(group, vec![(Representation::regular(group)?, n)])
    }

    /// `n` band-limited SO(2) fields, each the direct sum of irreps
    /// `0..=group.max_frequency`.
    pub fn so2_bandlimited(group: GroupSpec, n: usize) -> Result<Self> {
        let block = (0..=group.max_frequency)
            .map(|f| Ok((Representation::irrep(group, f)?, 1)))
            .collect::<Result<Vec<_>>>()?;
        let fields = (0..n).flat_map(|_| block.iter().cloned()).collect();
        Self::new(group, fields)
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn fields(&self) -> &[(Representation, usize)] {
        &self.fields
    }

    pub fn total_channels(&self) -> usize {
        self.fields.iter().map(|(r, m)| r.dim() * m).sum()
    }

    /// Number of representation copies.
    pub fn num_fields(&self) -> usize {
        self.fields.iter().map(|(_, m)| m).sum()
    }

    /// Every representation copy in channel order.
    pub fn slots(&self) -> Vec<FieldSlot> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.num_fields());
        for (rep, m) in &self.fields {
            for _ in 0..*m {
                out.push(FieldSlot { offset, rep: rep.clone() });
                offset += rep.dim();
            }
        }
        out
    }

    pub fn is_trivial_only(&self) -> bool {
        self.fields.iter().all(|(r, _)| r.is_trivial())
    }

    pub fn is_permutation_only(&self) -> bool {
        self.fields.iter().all(|(r, _)| r.is_permutation())
    }

    /// Block-diagonal matrix of `ρ(g)` over all channels.
    pub fn fiber_matrix(&self, g: &GroupElement) -> Result<DMatrix<f64>> {
        let c = self.total_channels();
        let mut m = DMatrix::zeros(c, c);
        let mut off = 0;
        for (rep, mult) in &self.fields {
            let block = rep.matrix(g)?;
            let d = rep.dim();
            for _ in 0..*mult {
                m.view_mut((off, off), (d, d)).copy_from(&block);
                off += d;
            }
        }
        Ok(m)
    }

    /// Compact descriptor, e.g. `D4[regular*7]` or `SO2(L=1)[irrep0*1,irrep1*1]`.
    pub fn descriptor(&self) -> String {
        let parts: Vec<String> = self.fields.iter().map(|(r, m)| format!("{r}*{m}")).collect();
        format!("{}[{}]", self.group, parts.join(","))
    }

    /// Frequencies of the band-limited block this SO(2) field type repeats.
    pub fn fourier_block(&self) -> Result<Vec<u32>> {
        if self.group.is_finite() {
            return Err(Error::NonIrrepFieldType);
        }
        let freqs: Vec<u32> = self
            .slots()
            .iter()
            .map(|s| s.rep.frequency().ok_or(Error::NonIrrepFieldType))
            .collect::<Result<_>>()?;
        let block_len = freqs.iter().skip(1).position(|&f| f == freqs[0]).map_or(freqs.len(), |p| p + 1);
        let block = freqs[..block_len].to_vec();
        let mut sorted = block.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != block.len() || freqs.chunks(block_len).any(|c| c != block.as_slice()) {
            return Err(Error::RepresentationMismatch(format!(
                "{} is not a repetition of one band-limited block",
                self.descriptor()
            )));
        }
        Ok(block)
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

/// Restricts a field type to [`GroupSpec::restriction_subgroup`].
///
/// Returns the subgroup field type and an orthogonal change of basis `B`
/// (`C × C'`) such that restricted features are `Bᵀ x` and
/// `ρ_restricted(h) = Bᵀ ρ(h) B` for every subgroup element `h`.
/// Regular fields split into two copies of the subgroup's regular
/// representation, one per coset `H·t` with `t ∈ {e, r}`. Over `SO(2)` only
/// the frequency-0 components survive and `B` is a column selection.
pub fn restrict(ft: &FieldType) -> Result<(FieldType, DMatrix<f64>)> {
    let group = ft.group();
    let sub = group.restriction_subgroup()?;
    let c = ft.total_channels();

    if !group.is_finite() {
        let keep: Vec<usize> =
            ft.slots().iter().filter(|s| s.rep.is_trivial()).map(|s| s.offset).collect();
        if keep.is_empty() {
            return Err(Error::EmptyRestriction(ft.descriptor()));
        }
        let mut b = DMatrix::zeros(c, keep.len());
        for (j, &ch) in keep.iter().enumerate() {
            b[(ch, j)] = 1.0;
        }
        return Ok((FieldType::trivial(sub, keep.len())?, b));
    }

    let sub_elems = sub.elements()?;
    let coset_reps = [GroupElement::IDENTITY, GroupElement::rotation_step(1, group.rotation_order)];
    let mut fields = Vec::new();
    let mut b = DMatrix::zeros(c, c);
    let mut offset = 0;
    for (rep, mult) in ft.fields() {
        match rep.kind() {
            RepKind::Trivial => {
                for i in 0..*mult {
                    b[(offset + i, offset + i)] = 1.0;
                }
                fields.push((Representation::trivial(sub), *mult));
            }
            RepKind::Regular => {
                let d = rep.dim();
                let half = d / 2;
                for copy in 0..*mult {
                    let base = offset + copy * d;
                    for (j, t) in coset_reps.iter().enumerate() {
                        for h in &sub_elems {
                            let ht = group.compose(h, t)?;
                            let old = base + group.element_index(&ht)?;
                            let new = base + j * half + sub.element_index(h)?;
                            b[(old, new)] = 1.0;
                        }
                    }
                }
                fields.push((Representation::regular(sub)?, 2 * mult));
            }
            RepKind::Irrep { .. } => {
                return Err(Error::UnsupportedRepresentation(
                    "irreps of finite groups cannot be restricted".into(),
                ))
            }
        }
        offset += rep.dim() * mult;
    }
    Ok((FieldType::new(sub, fields)?, b))
}

/// Discrete Fourier pair for one band-limited SO(2) field.
#[derive(Debug, Clone)]
pub struct FourierPair {
    /// `D × N`: group samples to irrep coefficients.
    pub forward: DMatrix<f64>,
    /// `N × D`: irrep coefficients to samples at angles `2πn/N`.
    pub inverse: DMatrix<f64>,
}

/// Builds the sampling (inverse) and analysis (forward) matrices for a field
/// type holding a single band-limited block of SO(2) irreps.
pub fn group_fourier_pair(ft: &FieldType, num_samples: usize) -> Result<FourierPair> {
    let freqs = ft.fourier_block()?;
    if freqs.len() != ft.num_fields() {
        return Err(Error::RepresentationMismatch(
            "expected exactly one band-limited field".into(),
        ));
    }
    fourier_pair_for(&freqs, num_samples)
}

pub(crate) fn fourier_pair_for(freqs: &[u32], num_samples: usize) -> Result<FourierPair> {
    let max_frequency = freqs.iter().copied().max().unwrap_or(0);
    if num_samples < 2 * max_frequency as usize + 1 {
        return Err(Error::Undersampled { num_samples, max_frequency });
    }
    let n = num_samples;
    let d: usize = freqs.iter().map(|&f| if f == 0 { 1 } else { 2 }).sum();
    let mut inverse = DMatrix::zeros(n, d);
    let mut forward = DMatrix::zeros(d, n);
    let nf = n as f64;
    for s in 0..n {
        let theta = TAU * s as f64 / nf;
        let mut col = 0;
        for &f in freqs {
            if f == 0 {
                inverse[(s, col)] = 1.0;
                forward[(col, s)] = 1.0 / nf;
                col += 1;
            } else {
                let (sn, cs) = (f as f64 * theta).sin_cos();
                inverse[(s, col)] = cs;
                inverse[(s, col + 1)] = sn;
                forward[(col, s)] = 2.0 * cs / nf;
                forward[(col + 1, s)] = 2.0 * sn / nf;
                col += 2;
            }
        }
    }
    Ok(FourierPair { forward, inverse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    #[test]
    fn element_counts() {
        assert_eq!(GroupSpec::trivial().elements().unwrap(), vec![GroupElement::IDENTITY]);
        let c4 = GroupSpec::cyclic(4).unwrap().elements().unwrap();
        let angles: Vec<f64> = c4.iter().map(|g| g.rotation_angle).collect();
        for (a, e) in angles.iter().zip([0.0, PI / 2.0, PI, 3.0 * PI / 2.0]) {
            assert!((a - e).abs() < 1e-12);
        }
        let d4 = GroupSpec::dihedral(4).unwrap().elements().unwrap();
        assert_eq!(d4.len(), 8);
        assert_eq!(d4.iter().filter(|g| g.reflect).count(), 4);
        assert_eq!(GroupSpec::so2(1).elements(), Err(Error::ContinuousGroup));
    }

    #[test]
    fn dihedral_composition_rule() {
        let d = GroupSpec::dihedral(5).unwrap();
        let r = |k| GroupElement::rotation_step(k, 5);
        // (r^1 s)(r^2) = r^(1-2) s = r^4 s
        let got = d.compose(&r(1).reflected(), &r(2)).unwrap();
        assert_eq!(d.element_index(&got).unwrap(), d.element_index(&r(4).reflected()).unwrap());
        // spatial action is a homomorphism as well
        for a in d.elements().unwrap() {
            for b in d.elements().unwrap() {
                let ab = d.compose(&a, &b).unwrap();
                let (ma, mb, mab) = (a.spatial_matrix(), b.spatial_matrix(), ab.spatial_matrix());
                for i in 0..2 {
                    for j in 0..2 {
                        let prod = ma[i][0] * mb[0][j] + ma[i][1] * mb[1][j];
                        assert!((prod - mab[i][j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rep_matrix_examples() {
        let so2 = GroupSpec::so2(1);
        let psi1 = Representation::irrep(so2, 1).unwrap();
        let m = psi1.matrix(&GroupElement::rotation(PI / 2.0)).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        assert!(max_abs(&(m - want)) < 1e-15);

        let c2 = GroupSpec::cyclic(2).unwrap();
        let reg = Representation::regular(c2).unwrap();
        let m = reg.matrix(&GroupElement::rotation(PI)).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));

        let triv = Representation::trivial(GroupSpec::dihedral(3).unwrap());
        assert_eq!(triv.matrix(&GroupElement::REFLECTION).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn rep_matrix_rejects_foreign_elements() {
        let c4 = GroupSpec::cyclic(4).unwrap();
        let reg = Representation::regular(c4).unwrap();
        assert!(matches!(
            reg.matrix(&GroupElement::rotation_step(1, 8)),
            Err(Error::ElementGroupMismatch(..))
        ));
        assert!(reg.matrix(&GroupElement::REFLECTION).is_err());
    }

    #[test]
    fn haar_projector_examples() {
        let so2 = GroupSpec::so2(2);
        assert_eq!(Representation::trivial(so2).haar_mean_projector()[(0, 0)], 1.0);
        assert_eq!(
            Representation::irrep(so2, 1).unwrap().haar_mean_projector(),
            DMatrix::zeros(2, 2)
        );
        for n in [1, 3, 4, 6] {
            let g = GroupSpec::cyclic(n).unwrap();
            let p = Representation::regular(g).unwrap().haar_mean_projector();
            // brute force average of the N permutation matrices
            let mut acc = DMatrix::zeros(n as usize, n as usize);
            for e in g.elements().unwrap() {
                for j in 0..n as usize {
                    let gj = g.compose(&e, &g.elements().unwrap()[j]).unwrap();
                    acc[(g.element_index(&gj).unwrap(), j)] += 1.0 / n as f64;
                }
            }
            assert!(max_abs(&(p.clone() - acc)) < 1e-15);
            assert!(p.iter().all(|v| (v - 1.0 / n as f64).abs() < 1e-15));
        }
    }

    #[test]
    fn haar_projector_zero_iff_no_trivial_component() {
        let so2 = GroupSpec::so2(3);
        for f in 0..4 {
            let p = Representation::irrep(so2, f).unwrap().haar_mean_projector();
            assert_eq!(max_abs(&p) == 0.0, f != 0);
        }
        // the regular rep contains the trivial rep once
        let d4 = GroupSpec::dihedral(4).unwrap();
        let p = Representation::regular(d4).unwrap().haar_mean_projector();
        assert!((p.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn restrict_regular_c4_by_cosets() {
        let c4 = GroupSpec::cyclic(4).unwrap();
        let ft = FieldType::regular(c4, 1).unwrap();
        let (sub_ft, b) = restrict(&ft).unwrap();
        let c2 = GroupSpec::cyclic(2).unwrap();
        assert_eq!(sub_ft, FieldType::regular(c2, 2).unwrap());
        assert!(max_abs(&(b.transpose() * &b - DMatrix::identity(4, 4))) < 1e-15);
        for h in c2.elements().unwrap() {
            let lhs = sub_ft.fiber_matrix(&h).unwrap();
            let rhs = b.transpose() * ft.fiber_matrix(&h).unwrap() * &b;
            assert!(max_abs(&(lhs - rhs)) < 1e-12);
        }
    }

    #[test]
    fn restrict_trivial_dihedral_is_identity() {
        let d8 = GroupSpec::dihedral(8).unwrap();
        let ft = FieldType::trivial(d8, 3).unwrap();
        let (sub_ft, b) = restrict(&ft).unwrap();
        assert_eq!(sub_ft.group(), GroupSpec::dihedral(4).unwrap());
        assert!(sub_ft.is_trivial_only());
        assert_eq!(b, DMatrix::identity(3, 3));
    }

    #[test]
    fn restrict_so2_keeps_frequency_zero() {
        let so2 = GroupSpec::so2(2);
        let ft = FieldType::so2_bandlimited(so2, 3).unwrap();
        let (sub_ft, b) = restrict(&ft).unwrap();
        assert_eq!(sub_ft.total_channels(), 3);
        assert!(sub_ft.is_trivial_only());
        // field layout [ψ0, ψ1(2), ψ2(2)] per block of 5 channels
        for (j, ch) in [0, 5, 10].into_iter().enumerate() {
            assert_eq!(b[(ch, j)], 1.0);
        }
        assert_eq!(b.iter().filter(|v| **v != 0.0).count(), 3);
    }

    #[test]
    fn restrict_odd_order_fails() {
        let c3 = GroupSpec::cyclic(3).unwrap();
        assert_eq!(restrict(&FieldType::regular(c3, 1).unwrap()).unwrap_err(), Error::OddRotationOrder(3));
    }

    #[test]
    fn fourier_pair_examples() {
        let so2_0 = GroupSpec::so2(0);
        let pair = group_fourier_pair(&FieldType::so2_bandlimited(so2_0, 1).unwrap(), 1).unwrap();
        assert_eq!(pair.forward, DMatrix::from_element(1, 1, 1.0));
        assert_eq!(pair.inverse, DMatrix::from_element(1, 1, 1.0));

        let so2 = GroupSpec::so2(2);
        let ft = FieldType::so2_bandlimited(so2, 1).unwrap();
        let pair = group_fourier_pair(&ft, 8).unwrap();
        let id = &pair.forward * &pair.inverse;
        assert!(max_abs(&(id - DMatrix::identity(5, 5))) < 1e-12);

        // only the frequency-1 cosine coefficient active: samples trace cos θ
        let coef = DMatrix::from_column_slice(5, 1, &[0.0, 1.0, 0.0, 0.0, 0.0]);
        let samples = &pair.inverse * coef;
        for s in 0..8 {
            assert!((samples[s] - (TAU * s as f64 / 8.0).cos()).abs() < 1e-15);
        }
        assert_eq!(
            group_fourier_pair(&ft, 4).unwrap_err(),
            Error::Undersampled { num_samples: 4, max_frequency: 2 }
        );
    }

    #[test]
    fn fiber_matrix_is_block_diagonal() {
        let so2 = GroupSpec::so2(1);
        let ft = FieldType::so2_bandlimited(so2, 2).unwrap();
        let g = GroupElement::rotation(0.3);
        let m = ft.fiber_matrix(&g).unwrap();
        assert_eq!(m.nrows(), 6);
        assert!((m[(1, 1)] - 0.3f64.cos()).abs() < 1e-15);
        assert!((m[(4, 5)] + 0.3f64.sin()).abs() < 1e-15);
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(0, 1)], 0.0);
    }
}
