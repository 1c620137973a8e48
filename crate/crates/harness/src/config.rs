//! Run configuration: a TOML file with one table per concern, plus
//! `section.key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use equidp_core::autodiff::Padding;
use equidp_core::groups::GroupSpec;
use equidp_core::layers::{HeadPool, ResNetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKindCfg {
    Trivial,
    Cyclic,
    Dihedral,
    So2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupCfg {
    pub kind: GroupKindCfg,
    #[serde(default = "one")]
    pub rotation_order: u32,
    #[serde(default)]
    pub max_frequency: u32,
}

fn one() -> u32 {
    1
}

impl GroupCfg {
    pub fn spec(&self) -> Result<GroupSpec> {
        Ok(match self.kind {
            GroupKindCfg::Trivial => GroupSpec::trivial(),
            GroupKindCfg::Cyclic => GroupSpec::cyclic(self.rotation_order)?,
            GroupKindCfg::Dihedral => GroupSpec::dihedral(self.rotation_order)?,
            GroupKindCfg::So2 => GroupSpec::so2(self.max_frequency),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPoolCfg {
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub reference_widths: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "yes")]
    pub restrict_last_block: bool,
    #[serde(default = "yes")]
    pub weight_standardization: bool,
    #[serde(default = "head_max")]
    pub head_pool: HeadPoolCfg,
    #[serde(default = "eight")]
    pub fourier_samples: usize,
    pub norm_groups: Option<usize>,
}

fn yes() -> bool {
    true
}

fn head_max() -> HeadPoolCfg {
    HeadPoolCfg::Max
}

fn eight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerCfg {
    pub learning_rate: f64,
    /// Expected lot size `L = q·n`; the sample rate is derived from it.
    pub batch_expected: f64,
    pub clip_norm: f64,
    pub noise_multiplier: Option<f64>,
    pub num_updates: u64,
    #[serde(default = "one_usize")]
    pub aug_multiplicity: usize,
    pub ema_decay: f64,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSourceCfg {
    /// CIFAR-10 binary batches under `path`.
    Cifar10,
    /// Generated in memory from `seed`.
    Synthetic,
    /// Record files (`train.bin`, `test.bin`) as written by `gen-synthetic`.
    Records,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    pub source: DatasetSourceCfg,
    pub path: Option<PathBuf>,
    /// Keep only the first `subset_size` training records.
    pub subset_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub normalize: bool,
    /// Synthetic split sizes and image side.
    #[serde(default = "syn_train")]
    pub train_size: usize,
    #[serde(default = "syn_test")]
    pub test_size: usize,
    #[serde(default = "syn_side")]
    pub image_size: usize,
}

fn syn_train() -> usize {
    5000
}

fn syn_test() -> usize {
    1000
}

fn syn_side() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyCfg {
    pub delta: f64,
    pub target_epsilon: Option<f64>,
    /// Horizon used to calibrate σ for `target_epsilon`; defaults to
    /// `num_updates`. Training halts if it would cross the target.
    pub calibration_updates: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    Circular,
}

impl PaddingMode {
    pub fn padding(self) -> Padding {
        match self {
            PaddingMode::Zero => Padding::Zero(1),
            PaddingMode::Circular => Padding::Circular(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsCfg {
    #[serde(default = "f64p")]
    pub precision: Precision,
    #[serde(default = "zero_pad")]
    pub padding_mode: PaddingMode,
}

fn f64p() -> Precision {
    Precision::F64
}

fn zero_pad() -> PaddingMode {
    PaddingMode::Zero
}

impl Default for NumericsCfg {
    fn default() -> Self {
        Self { precision: Precision::F64, padding_mode: PaddingMode::Zero }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunCfg {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "log_every")]
    pub log_interval: u64,
    /// Samples per forward/backward chunk inside one lot.
    #[serde(default = "chunk")]
    pub micro_batch: usize,
    /// Worker threads; 0 lets the pool decide.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "l0_eps")]
    pub sparsity_eps: f64,
}

fn log_every() -> u64 {
    10
}

fn chunk() -> usize {
    64
}

fn l0_eps() -> f64 {
    equidp_core::metrics::DEFAULT_L0_EPS
}

impl Default for RunCfg {
    fn default() -> Self {
        Self { seed: 0, log_interval: 10, micro_batch: 64, threads: 0, deterministic: false, sparsity_eps: l0_eps() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub group: GroupCfg,
    pub model: ModelCfg,
    pub optimizer: OptimizerCfg,
    pub dataset: DatasetCfg,
    pub privacy: PrivacyCfg,
    #[serde(default)]
    pub numerics: NumericsCfg,
    #[serde(default)]
    pub run: RunCfg,
}

/// How the noise multiplier is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSource {
    Explicit(f64),
    Calibrated { target_epsilon: f64, horizon: u64 },
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::with_overrides(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides. Values
    /// are read as TOML literals and fall back to plain strings.
    pub fn with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.group.spec()?;
        let o = &self.optimizer;
        match (o.noise_multiplier, self.privacy.target_epsilon) {
            (Some(_), Some(_)) => return bad("optimizer.noise_multiplier and privacy.target_epsilon are mutually exclusive".into()),
            (None, None) => return bad("set exactly one of optimizer.noise_multiplier or privacy.target_epsilon".into()),
            (Some(s), None) if !(s >= 0.0) => return bad(format!("noise_multiplier must be ≥ 0, got {s}")),
            (None, Some(e)) if !(e > 0.0) => return bad(format!("target_epsilon must be positive, got {e}")),
            _ => {}
        }
        if !(o.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be ≥ 0, got {}", o.learning_rate));
        }
        if !(o.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", o.clip_norm));
        }
        if !(o.batch_expected > 0.0) {
            return bad(format!("batch_expected must be positive, got {}", o.batch_expected));
        }
        if o.aug_multiplicity == 0 {
            return bad("aug_multiplicity must be at least 1".into());
        }
        if !(0.0..1.0).contains(&o.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", o.ema_decay));
        }
        if !(self.privacy.delta > 0.0 && self.privacy.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.privacy.delta));
        }
        if self.model.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.model.reference_widths.contains(&0) {
            return bad("reference widths must be positive".into());
        }
        if self.run.micro_batch == 0 || self.run.log_interval == 0 {
            return bad("run.micro_batch and run.log_interval must be positive".into());
        }
        if matches!(self.dataset.source, DatasetSourceCfg::Cifar10 | DatasetSourceCfg::Records) && self.dataset.path.is_none() {
            return bad("dataset.path is required for file-backed sources".into());
        }
        if self.dataset.image_size % 8 != 0 {
            return bad(format!("dataset.image_size must be a multiple of 8, got {}", self.dataset.image_size));
        }
        Ok(())
    }

    pub fn noise_source(&self) -> NoiseSource {
        match (self.optimizer.noise_multiplier, self.privacy.target_epsilon) {
            (Some(s), _) => NoiseSource::Explicit(s),
            (None, Some(e)) => NoiseSource::Calibrated {
                target_epsilon: e,
                horizon: self.privacy.calibration_updates.unwrap_or(self.optimizer.num_updates),
            },
            (None, None) => unreachable!("validated"),
        }
    }

    /// Image side the model is built for.
    pub fn input_side(&self) -> usize {
        match self.dataset.source {
            DatasetSourceCfg::Cifar10 => crate::data::CIFAR_SIDE,
            _ => self.dataset.image_size,
        }
    }

    /// Model builder settings for images of side `image_size`.
    pub fn resnet(&self, image_size: usize) -> Result<ResNetConfig> {
        let m = &self.model;
        let mut r = ResNetConfig::new(self.group.spec()?, m.reference_widths, m.num_classes);
        r.image_size = image_size;
        r.padding = self.numerics.padding_mode.padding();
        r.norm_groups = m.norm_groups;
        r.fourier_samples = m.fourier_samples;
        r.restrict_last_block = m.restrict_last_block;
        r.weight_standardization = m.weight_standardization;
        r.head_pool = match m.head_pool {
            HeadPoolCfg::Max => HeadPool::Max,
            HeadPoolCfg::Avg => HeadPool::Avg,
        };
        r.seed = self.run.seed;
        Ok(r)
    }
}

fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.len() != 2 || path.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("override key `{key}` must be section.key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let section = table
        .entry(path[0].to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(section) = section else {
        return Err(HarnessError::Config(format!("`{}` is not a section", path[0])));
    };
    if raw == "none" {
        section.remove(path[1]);
    } else {
        section.insert(path[1].to_string(), value);
    }
    Ok(())
}
