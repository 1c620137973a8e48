//! Equivariant-ResNet-9 builder.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    ActKind, Block, EquivGroupNorm, ExpandPlan, FourierActivation, GroupPool, IidInstanceNorm, Layer, LayerNode,
    Model, ParamStore, Restriction,
};
use crate::autodiff::Padding;
use crate::error::{Error, Result};
use crate::groups::{FieldType, GroupSpec};
use crate::tensor::Tensor;

/// Reference widths calibrated so the D4 model has about 256k parameters.
/// The nominal (16, 32, 64) gives about 301k under this topology.
pub const REFERENCE_WIDTHS: [usize; 3] = [16, 32, 58];

/// Spatial pooling in front of the classifier head.
///
/// The last layer before the head is a normalization whose centring fixes
/// the spatial mean of every invariant channel to its bias, so average
/// pooling hands the head an input-independent vector for SO(2) models (and
/// a partly degenerate one for finite groups). The spatial maximum is still
/// invariant under grid-exact transforms and keeps the information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadPool {
    Max,
    Avg,
}

#[derive(Debug, Clone)]
pub struct ResNetConfig {
    pub group: GroupSpec,
    pub reference_widths: [usize; 3],
    pub num_classes: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub kernel_size: usize,
    pub padding: Padding,
    /// Group-norm group count; `None` picks [`EquivGroupNorm::default_groups`].
    pub norm_groups: Option<usize>,
    pub activation: ActKind,
    /// Samples per field for the SO(2) Fourier activation.
    pub fourier_samples: usize,
    /// Insert the restriction before the last residual block.
    pub restrict_last_block: bool,
    pub weight_standardization: bool,
    pub head_pool: HeadPool,
    pub seed: u64,
}

impl ResNetConfig {
    pub fn new(group: GroupSpec, reference_widths: [usize; 3], num_classes: usize) -> Self {
        Self {
            group,
            reference_widths,
            num_classes,
            in_channels: 3,
            image_size: 32,
            kernel_size: 3,
            padding: Padding::Zero(1),
            norm_groups: None,
            activation: ActKind::Mish,
            fourier_samples: 8,
            restrict_last_block: true,
            weight_standardization: true,
            head_pool: HeadPool::Max,
            seed: 0,
        }
    }
}

/// Number of fields for a reference width: `max(1, round(w·√(1.5|G|)/|G|))`.
/// The scale factor is clamped to 1 for the trivial group, and SO(2) uses
/// the dimension `2L+1` of its band-limited field in place of `|G|`.
pub fn field_count(group: &GroupSpec, width: usize) -> usize {
    if group.is_trivial() {
        return width.max(1);
    }
    let n = group.order().unwrap_or(2 * group.max_frequency as usize + 1) as f64;
    ((width as f64 * (1.5 * n).sqrt() / n).round() as usize).max(1)
}

fn stage_field(group: GroupSpec, n: usize) -> Result<FieldType> {
    if group.is_finite() {
        FieldType::regular(group, n)
    } else {
        FieldType::so2_bandlimited(group, n)
    }
}

struct Builder<'a> {
    cfg: &'a ResNetConfig,
    rng: ChaCha8Rng,
    params: ParamStore,
    manifest: Vec<String>,
}

impl Builder<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let t = Tensor::from_fn(shape, |_| dist.sample(&mut self.rng));
        self.params.register(name, t)
    }

    fn note(&mut self, node: &LayerNode, params: usize) {
        self.manifest.push(format!(
            "{} kind={} in={} out={} params={}",
            node.name,
            node.layer.kind_name(),
            node.field_in.descriptor(),
            node.field_out.descriptor(),
            params
        ));
    }

    fn node(&mut self, name: String, layer: Layer, field_in: &FieldType, field_out: &FieldType, params: usize) -> LayerNode {
        let node = LayerNode { name, layer, field_in: field_in.clone(), field_out: field_out.clone() };
        self.note(&node, params);
        node
    }

    fn conv(&mut self, name: &str, fin: &FieldType, fout: &FieldType) -> Result<LayerNode> {
        let plan = Arc::new(ExpandPlan::new(fin, fout, self.cfg.kernel_size)?);
        let n = plan.num_coefficients();
        let id = self.normal(&format!("{name}.coefficients"), &[n], 1.0);
        let layer = Layer::Conv { plan, coefficients: id, standardize: self.cfg.weight_standardization };
        Ok(self.node(name.into(), layer, fin, fout, n))
    }

    fn act(&mut self, name: &str, field: &FieldType) -> Result<LayerNode> {
        let layer = if field.is_permutation_only() || field.is_trivial_only() {
            Layer::Activation { kind: self.cfg.activation }
        } else {
            Layer::FourierAct(FourierActivation::new(field, self.cfg.fourier_samples, self.cfg.activation)?)
        };
        Ok(self.node(name.into(), layer, field, field, 0))
    }

    fn norm(&mut self, name: &str, field: &FieldType, size: usize) -> Result<LayerNode> {
        if field.group().is_finite() {
            let groups = self.cfg.norm_groups.unwrap_or_else(|| EquivGroupNorm::default_groups(field.num_fields()));
            let norm = EquivGroupNorm::new(field, groups, true, size, size)?;
            let n = norm.num_affine();
            let w = self.params.register(format!("{name}.weight"), Tensor::ones(&[n]));
            let b = self.params.register(format!("{name}.bias"), Tensor::zeros(&[n]));
            Ok(self.node(name.into(), Layer::GroupNorm { norm, weight: Some(w), bias: Some(b) }, field, field, 2 * n))
        } else {
            let norm = IidInstanceNorm::new(field, true, size, size)?;
            let (nw, nb) = (norm.num_weights(), norm.num_biases());
            let w = self.params.register(format!("{name}.weight"), Tensor::ones(&[nw]));
            let b = (nb > 0).then(|| self.params.register(format!("{name}.bias"), Tensor::zeros(&[nb])));
            Ok(self.node(name.into(), Layer::IidNorm { norm, weight: Some(w), bias: b }, field, field, nw + nb))
        }
    }

    fn unit(&mut self, prefix: &str, fin: &FieldType, fout: &FieldType, size: usize) -> Result<Vec<LayerNode>> {
        Ok(vec![
            self.conv(&format!("{prefix}.conv"), fin, fout)?,
            self.act(&format!("{prefix}.act"), fout)?,
            self.norm(&format!("{prefix}.norm"), fout, size)?,
        ])
    }
}

/// Builds the model: stem, three `conv → act → norm → pool` stages each
/// followed by a two-unit residual block, restriction before the last
/// residual block, then group pooling, global spatial pooling and a linear
/// head.
///
/// Finite groups use regular fields, Mish and equivariant group norm with
/// max pooling. SO(2) uses band-limited irrep fields, the Fourier activation,
/// i.i.d. instance norm and average pooling (a channelwise max does not
/// commute with rotations of irrep coefficients).
pub fn build_eq_resnet9(cfg: &ResNetConfig) -> Result<Model> {
    if cfg.reference_widths.contains(&0) || cfg.num_classes == 0 || cfg.in_channels == 0 {
        return Err(Error::InvalidArgument("widths, classes and input channels must be positive".into()));
    }
    if cfg.image_size % 8 != 0 {
        return Err(Error::InvalidArgument(format!("image size {} is not divisible by 8", cfg.image_size)));
    }
    let group = cfg.group;
    let restrict = cfg.restrict_last_block && !group.is_trivial();
    if restrict {
        group.restriction_subgroup()?;
    }
    let mut b = Builder {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        params: ParamStore::new(),
        manifest: vec![format!("group={group} widths={:?} classes={}", cfg.reference_widths, cfg.num_classes)],
    };
    let counts: Vec<usize> = cfg.reference_widths.iter().map(|&w| field_count(&group, w)).collect();
    let image = FieldType::trivial(group, cfg.in_channels)?;
    let mut blocks = Vec::new();
    let mut size = cfg.image_size;

    let mut field = stage_field(group, counts[0])?;
    for n in b.unit("stem", &image, &field, size)? {
        blocks.push(Block::Layer(n));
    }
    for (i, &c) in counts.iter().enumerate() {
        let s = i + 1;
        let next = stage_field(group, c)?;
        for n in b.unit(&format!("stage{s}"), &field, &next, size)? {
            blocks.push(Block::Layer(n));
        }
        field = next;
        let pool = if group.is_finite() { Layer::MaxPool(2) } else { Layer::AvgPool(2) };
        blocks.push(Block::Layer(b.node(format!("stage{s}.pool"), pool, &field, &field, 0)));
        size /= 2;
        if s == 3 && restrict {
            let r = Restriction::new(&field)?;
            let out = r.field_out().clone();
            blocks.push(Block::Layer(b.node("stage3.restrict".into(), Layer::Restrict(r), &field, &out, 0)));
            field = out;
        }
        let mut layers = b.unit(&format!("stage{s}.res1"), &field, &field, size)?;
        layers.extend(b.unit(&format!("stage{s}.res2"), &field, &field, size)?);
        blocks.push(Block::Residual { name: format!("stage{s}.res"), layers });
    }

    let gp = GroupPool::new(&field)?;
    let pooled = gp.field_out().clone();
    blocks.push(Block::Layer(b.node("group_pool".into(), Layer::GroupPool(gp), &field, &pooled, 0)));
    let (name, layer) = match cfg.head_pool {
        HeadPool::Max => ("global_max_pool", Layer::GlobalMaxPool),
        HeadPool::Avg => ("global_avg_pool", Layer::GlobalAvgPool),
    };
    blocks.push(Block::Layer(b.node(name.into(), layer, &pooled, &pooled, 0)));
    let f = pooled.total_channels();
    let std = 1.0 / (f as f64).sqrt();
    let w = b.normal("head.weight", &[f, cfg.num_classes], std);
    let bias = b.params.register("head.bias", Tensor::zeros(&[cfg.num_classes]));
    let logits = FieldType::trivial(pooled.group(), cfg.num_classes)?;
    let head = b.node("head".into(), Layer::Linear { weight: w, bias }, &pooled, &logits, f * cfg.num_classes + cfg.num_classes);
    blocks.push(Block::Layer(head));

    let model = Model {
        group,
        num_classes: cfg.num_classes,
        image_size: cfg.image_size,
        padding: cfg.padding,
        blocks,
        params: b.params,
        manifest: b.manifest,
    };
    model.validate()?;
    Ok(model)
}
