//! Image datasets: CIFAR-10 style binary records and a synthetic set of
//! shapes drawn at random orientations.

use std::f64::consts::TAU;
use std::path::Path;

use equidp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{HarnessError, Result};

pub const CHANNELS: usize = 3;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_RECORD: usize = 1 + CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Images in `[0, 1]`, channel-planar, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub side: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<f32>, labels: Vec<usize>, side: usize, num_classes: usize) -> Result<Self> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if labels.is_empty() {
            return bad("dataset is empty".into());
        }
        if images.len() != labels.len() * CHANNELS * side * side {
            return bad(format!("{} pixels for {} images of side {side}", images.len(), labels.len()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return bad(format!("label {l} out of range for {num_classes} classes"));
        }
        Ok(Self { images, labels, side, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        CHANNELS * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// The first `n` records.
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(HarnessError::Config("subset size must be positive".into()));
        }
        let n = n.min(self.len());
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
        Ok(self)
    }

    /// `(B, 3, S, S)` tensor of the given records after normalization.
    pub fn batch(&self, indices: &[usize], norm: &Normalization) -> Result<Tensor> {
        let images: Vec<&[f32]> = indices.iter().map(|&i| self.image(i)).collect();
        stack(&images, self.side, norm)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Normalizes and stacks raw images into a `(B, 3, S, S)` tensor.
pub fn stack(images: &[&[f32]], side: usize, norm: &Normalization) -> Result<Tensor> {
    let plane = side * side;
    let mut data = Vec::with_capacity(images.len() * CHANNELS * plane);
    for img in images {
        for c in 0..CHANNELS {
            let (m, s) = (norm.mean[c], norm.std[c]);
            data.extend(img[c * plane..(c + 1) * plane].iter().map(|&v| (v as f64 - m) / s));
        }
    }
    Ok(Tensor::new(&[images.len(), CHANNELS, side, side], data)?)
}

/// Per-channel affine input normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: [0.0; CHANNELS], std: [1.0; CHANNELS] }
    }

    /// Per-channel mean and standard deviation over a dataset.
    pub fn fit(ds: &Dataset) -> Self {
        let plane = ds.side * ds.side;
        let mut mean = [0.0; CHANNELS];
        let mut std = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            let (mut s, mut s2) = (0.0, 0.0);
            for i in 0..ds.len() {
                for &v in &ds.image(i)[c * plane..(c + 1) * plane] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
            }
            let n = (ds.len() * plane) as f64;
            mean[c] = s / n;
            std[c] = (s2 / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
        }
        Self { mean, std }
    }
}

/// Reads records of `1 + 3·side²` bytes: a label byte, then red, green and
/// blue planes in row-major order. Pixel bytes are scaled by `1/255`.
pub fn load_records(path: &Path, side: usize, num_classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let rec = 1 + CHANNELS * side * side;
    let malformed = |reason: String| HarnessError::MalformedRecord { path: path.display().to_string(), reason };
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(malformed(format!("length {} is not a positive multiple of {rec}", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * (rec - 1));
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        let l = r[0] as usize;
        if l >= num_classes {
            return Err(malformed(format!("label {l} out of range for {num_classes} classes")));
        }
        labels.push(l);
        images.extend(r[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(images, labels, side, num_classes)
}

/// One CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    load_records(path, CIFAR_SIDE, CIFAR_CLASSES)
}

/// Training batches `data_batch_{1..5}.bin` and `test_batch.bin` from a
/// directory. Missing training batches are skipped; at least one must exist.
pub fn load_cifar10_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train: Option<Dataset> = None;
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if !p.exists() {
            continue;
        }
        let d = load_cifar10_binary(&p)?;
        train = Some(match train {
            None => d,
            Some(mut t) => {
                t.images.extend(d.images);
                t.labels.extend(d.labels);
                t
            }
        });
    }
    let train = train.ok_or_else(|| HarnessError::Config(format!("no data_batch_*.bin under {}", dir.display())))?;
    let test = load_cifar10_binary(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Writes records in the format read by [`load_records`], rounding pixels
/// to the nearest byte.
pub fn write_records(path: &Path, ds: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(ds.len() * (1 + ds.image_len()));
    for i in 0..ds.len() {
        out.push(u8::try_from(ds.labels[i]).map_err(|_| HarnessError::Config("label does not fit a byte".into()))?);
        out.extend(ds.image(i).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub const SHAPE_NAMES: [&str; 8] = ["bar", "ell", "tee", "plus", "triangle", "square", "ring", "parallel"];

type Segment = ((f64, f64), (f64, f64));

fn segments(class: usize) -> Vec<Segment> {
    let tri: Vec<(f64, f64)> =
        (0..3).map(|k| (0.9 * (TAU / 4.0 + k as f64 * TAU / 3.0).cos(), 0.9 * (TAU / 4.0 + k as f64 * TAU / 3.0).sin())).collect();
    match class {
        0 => vec![((-1.0, 0.0), (1.0, 0.0))],
        1 => vec![((-0.6, -0.8), (-0.6, 0.8)), ((-0.6, -0.8), (0.7, -0.8))],
        2 => vec![((-0.9, 0.7), (0.9, 0.7)), ((0.0, 0.7), (0.0, -0.9))],
        3 => vec![((-0.9, 0.0), (0.9, 0.0)), ((0.0, -0.9), (0.0, 0.9))],
        4 => vec![(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])],
        5 => vec![
            ((-0.7, -0.7), (0.7, -0.7)),
            ((0.7, -0.7), (0.7, 0.7)),
            ((0.7, 0.7), (-0.7, 0.7)),
            ((-0.7, 0.7), (-0.7, -0.7)),
        ],
        6 => Vec::new(),
        _ => vec![((-0.9, 0.45), (0.9, 0.45)), ((-0.9, -0.45), (0.9, -0.45))],
    }
}

fn segment_distance(p: (f64, f64), (a, b): Segment) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Where and how a shape is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub angle: f64,
    pub reflect: bool,
    /// Pixels per shape unit.
    pub scale: f64,
    pub offset: (f64, f64),
}

/// Anti-aliased stroke coverage in `[0, 1]` of shape `class` on a
/// `side × side` grid, row-major.
pub fn render_shape(class: usize, pose: Pose, side: usize) -> Vec<f64> {
    const HALF_WIDTH: f64 = 0.8;
    let segs = segments(class);
    let c = (side as f64 - 1.0) / 2.0;
    let (s, co) = pose.angle.sin_cos();
    let mut out = vec![0.0; side * side];
    for i in 0..side {
        for j in 0..side {
            // pixel → centred Cartesian → shape frame
            let x = j as f64 - c - pose.offset.0;
            let y = c - i as f64 - pose.offset.1;
            let (xr, mut yr) = ((co * x + s * y) / pose.scale, (-s * x + co * y) / pose.scale);
            if pose.reflect {
                yr = -yr;
            }
            let d_units = if class == 6 {
                ((xr * xr + yr * yr).sqrt() - 0.75).abs()
            } else {
                segs.iter().map(|&sg| segment_distance((xr, yr), sg)).fold(f64::INFINITY, f64::min)
            };
            let d = d_units * pose.scale;
            out[i * side + j] = (HALF_WIDTH + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    out
}

/// Labels are shape identities; each image draws its shape at a uniformly
/// random angle, a random reflection, slight scale and position jitter, with
/// random foreground/background colours of random polarity (light on dark or
/// dark on light) and Gaussian pixel noise.
pub fn synthetic_oriented_dataset(n: usize, num_classes: usize, side: usize, seed: u64) -> Result<Dataset> {
    synthetic_stream(n, num_classes, side, seed, 0)
}

/// As [`synthetic_oriented_dataset`], drawing from an independent stream so
/// that train and test splits under one seed do not overlap.
pub fn synthetic_stream(n: usize, num_classes: usize, side: usize, seed: u64, stream: u64) -> Result<Dataset> {
    if !(2..=SHAPE_NAMES.len()).contains(&num_classes) {
        return Err(HarnessError::Config(format!("synthetic data has 2 to {} classes, asked for {num_classes}", SHAPE_NAMES.len())));
    }
    if n == 0 || side < 8 {
        return Err(HarnessError::Config(format!("cannot generate {n} images of side {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");
    let plane = side * side;
    let mut images = Vec::with_capacity(n * CHANNELS * plane);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % num_classes;
        let pose = Pose {
            angle: rng.random::<f64>() * TAU,
            reflect: rng.random::<bool>(),
            scale: side as f64 * 0.34 * rng.random_range(0.85..1.0),
            offset: (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        };
        let cover = render_shape(class, pose, side);
        let mut fg: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let mut bg: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.0..0.3));
        // random polarity equalizes the class-conditional pixel means
        if rng.random::<bool>() {
            std::mem::swap(&mut fg, &mut bg);
        }
        for c in 0..CHANNELS {
            for &a in &cover {
                let v = bg[c] + a * (fg[c] - bg[c]) + noise.sample(&mut rng);
                images.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(class);
    }
    Dataset::new(images, labels, side, num_classes)
}
