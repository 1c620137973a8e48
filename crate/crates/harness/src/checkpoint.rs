//! Checkpoints: a TOML manifest plus a binary blob of little-endian `f32`
//! arrays, each preceded by its element count as a little-endian `u64`.

use std::path::{Path, PathBuf};

use equidp_core::accountant::{Accountant, Conversion};
use equidp_core::layers::{build_eq_resnet9, Model};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Normalization;
use crate::error::{HarnessError, Result};

pub const FORMAT: &str = "equidp-checkpoint/1";
pub const MANIFEST_FILE: &str = "checkpoint.toml";
pub const BLOB_FILE: &str = "checkpoint.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    pub steps: u64,
    pub delta: f64,
    /// ε reported at save time.
    pub epsilon: f64,
    pub order: f64,
}

impl AccountantState {
    /// `(ε, α)` recomputed from the stored sampling parameters. A zero
    /// noise multiplier gives no guarantee once any step was taken.
    pub fn to_epsilon(&self) -> Result<(f64, f64)> {
        if self.noise_multiplier == 0.0 {
            return Ok(if self.steps == 0 { (0.0, f64::NAN) } else { (f64::INFINITY, f64::NAN) });
        }
        let mut a = Accountant::new(self.sample_rate, self.noise_multiplier)?;
        a.step(self.steps);
        Ok(a.epsilon(self.delta, Conversion::Improved)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// `param` for the trained values, `ema` for their moving average.
    pub role: String,
    pub shape: Vec<usize>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub image_size: usize,
    pub parameter_count: usize,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub accountant: AccountantState,
    /// Layer descriptions from the model builder.
    pub layers: Vec<String>,
    pub arrays: Vec<ArrayEntry>,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub arrays: Vec<Vec<f32>>,
}

impl Checkpoint {
    /// Snapshot of `model` with its EMA shadow (flat, registration order).
    pub fn capture(
        cfg: &Config,
        model: &Model,
        ema: &[f64],
        norm: &Normalization,
        accountant: AccountantState,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        let mut arrays = Vec::new();
        for (role, source) in [("param", None), ("ema", Some(ema))] {
            let mut off = 0;
            for p in model.params.iter() {
                let n = p.value.len();
                let values: Vec<f32> = match source {
                    None => p.value.data().iter().map(|&v| v as f32).collect(),
                    Some(flat) => flat
                        .get(off..off + n)
                        .ok_or_else(|| HarnessError::MalformedCheckpoint("EMA shorter than the model".into()))?
                        .iter()
                        .map(|&v| v as f32)
                        .collect(),
                };
                off += n;
                entries.push(ArrayEntry { name: p.name.clone(), role: role.into(), shape: p.value.shape().to_vec(), count: n as u64 });
                arrays.push(values);
            }
        }
        Ok(Self {
            manifest: Manifest {
                format: FORMAT.into(),
                image_size: model.image_size,
                parameter_count: model.count_parameters(),
                norm_mean: norm.mean.to_vec(),
                norm_std: norm.std.to_vec(),
                accountant,
                layers: model.manifest.clone(),
                arrays: entries,
                config: cfg.clone(),
            },
            arrays,
        })
    }

    pub fn blob(&self) -> Vec<u8> {
        let total: usize = self.arrays.iter().map(|a| 8 + 4 * a.len()).sum();
        let mut out = Vec::with_capacity(total);
        for a in &self.arrays {
            out.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest_text(&self) -> String {
        toml::to_string(&self.manifest).expect("manifest serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir)?;
        let (m, b) = (dir.join(MANIFEST_FILE), dir.join(BLOB_FILE));
        std::fs::write(&m, self.manifest_text())?;
        std::fs::write(&b, self.blob())?;
        Ok((m, b))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let blob = std::fs::read(dir.join(BLOB_FILE))?;
        Self::from_parts(&text, &blob)
    }

    pub fn from_parts(manifest_text: &str, blob: &[u8]) -> Result<Self> {
        let bad = |m: String| HarnessError::MalformedCheckpoint(m);
        let manifest: Manifest = toml::from_str(manifest_text).map_err(|e| bad(e.to_string()))?;
        if manifest.format != FORMAT {
            return Err(bad(format!("unknown format {}", manifest.format)));
        }
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let mut pos = 0usize;
        for e in &manifest.arrays {
            let head = blob.get(pos..pos + 8).ok_or_else(|| bad(format!("blob ends before {}", e.name)))?;
            let count = u64::from_le_bytes(head.try_into().expect("8 bytes"));
            pos += 8;
            let want: u64 = e.shape.iter().product::<usize>() as u64;
            if count != e.count || count != want {
                return Err(bad(format!("{} holds {count} values, manifest expects {} (shape {:?})", e.name, e.count, e.shape)));
            }
            let bytes = blob
                .get(pos..pos + 4 * count as usize)
                .ok_or_else(|| bad(format!("blob truncated inside {}", e.name)))?;
            arrays.push(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
            pos += 4 * count as usize;
        }
        if pos != blob.len() {
            return Err(bad(format!("{} trailing bytes", blob.len() - pos)));
        }
        Ok(Self { manifest, arrays })
    }

    pub fn normalization(&self) -> Result<Normalization> {
        let m = &self.manifest;
        let (Ok(mean), Ok(std)) = (m.norm_mean.clone().try_into(), m.norm_std.clone().try_into()) else {
            return Err(HarnessError::MalformedCheckpoint("normalization needs one value per channel".into()));
        };
        Ok(Normalization { mean, std })
    }

    /// Flat values of one role in registration order.
    pub fn flat(&self, role: &str) -> Vec<f64> {
        self.manifest
            .arrays
            .iter()
            .zip(&self.arrays)
            .filter(|(e, _)| e.role == role)
            .flat_map(|(_, a)| a.iter().map(|&v| v as f64))
            .collect()
    }

    /// Rebuilds the model and loads either the trained (`param`) or the
    /// averaged (`ema`) values.
    pub fn model(&self, role: &str) -> Result<Model> {
        let cfg = self.manifest.config.resnet(self.manifest.image_size)?;
        let mut model = build_eq_resnet9(&cfg)?;
        let names: Vec<&str> = self.manifest.arrays.iter().filter(|e| e.role == role).map(|e| e.name.as_str()).collect();
        let expect: Vec<&str> = model.params.iter().map(|p| p.name.as_str()).collect();
        if names != expect {
            return Err(HarnessError::MalformedCheckpoint(format!("{role} arrays do not match the model's parameters")));
        }
        model.params.assign_flat(&self.flat(role))?;
        Ok(model)
    }
}
