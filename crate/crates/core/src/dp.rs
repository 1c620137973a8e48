//! DP-SGD: Poisson sampling, per-sample clipping, Gaussian noise, SGD and a
//! parameter EMA.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyParams {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument(format!("clip norm must be positive, got {}", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::InvalidArgument(format!("noise multiplier must be ≥ 0, got {}", self.noise_multiplier)));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::InvalidRate(self.sample_rate));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("δ must lie in (0, 1), got {}", self.delta)));
        }
        Ok(())
    }
}

/// Includes each of `0..n` independently with probability `q`.
pub fn poisson_sample<R: Rng + ?Sized>(n: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::InvalidRate(q));
    }
    if q == 1.0 {
        return Ok((0..n).collect());
    }
    Ok((0..n).filter(|_| rng.random::<f64>() < q).collect())
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `g` by `min(1, C/‖g‖)` in place and returns the original norm.
pub fn clip_gradient(g: &mut [f64], clip_norm: f64) -> f64 {
    let n = l2_norm(g);
    if n > clip_norm {
        let s = clip_norm / n;
        g.iter_mut().for_each(|v| *v *= s);
    }
    n
}

/// Summary of one privatized step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivatizeStats {
    pub lot_size: usize,
    pub mean_norm: f64,
    pub clipped_fraction: f64,
    pub max_clipped_norm: f64,
}

/// `(Σ_b clip(g_b, C) + N(0, σ²C²I)) / L`.
///
/// The noise vector is drawn before any gradient is inspected, so its
/// values depend only on the generator state.
pub fn privatize<R: Rng + ?Sized>(
    per_sample: &[Vec<f64>],
    dim: usize,
    clip_norm: f64,
    noise_multiplier: f64,
    expected_lot_size: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, PrivatizeStats)> {
    if !(expected_lot_size > 0.0) {
        return Err(Error::InvalidArgument(format!("expected lot size must be positive, got {expected_lot_size}")));
    }
    let std = noise_multiplier * clip_norm;
    let mut out: Vec<f64> = if std > 0.0 {
        (0..dim).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        vec![0.0; dim]
    };
    let mut acc = vec![0.0; dim];
    let (mut norm_sum, mut clipped, mut max_norm) = (0.0, 0usize, 0.0f64);
    for g in per_sample {
        if g.len() != dim {
            return Err(Error::LengthMismatch { expected: dim, got: g.len() });
        }
        let mut c = g.clone();
        let n = clip_gradient(&mut c, clip_norm);
        let after = l2_norm(&c);
        debug_assert!(after <= clip_norm * (1.0 + 1e-12), "clipped norm {after} exceeds {clip_norm}");
        norm_sum += n;
        clipped += usize::from(n > clip_norm);
        max_norm = max_norm.max(after);
        acc.iter_mut().zip(&c).for_each(|(a, v)| *a += v);
    }
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = (*o + a) / expected_lot_size;
    }
    let b = per_sample.len();
    Ok((
        out,
        PrivatizeStats {
            lot_size: b,
            mean_norm: if b > 0 { norm_sum / b as f64 } else { 0.0 },
            clipped_fraction: if b > 0 { clipped as f64 / b as f64 } else { 0.0 },
            max_clipped_norm: max_norm,
        },
    ))
}

/// `θ ← θ - lr·g`.
pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) {
    params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
}

/// Exponential moving average of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<f64>,
}

impl Ema {
    pub fn new(params: &[f64], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { decay, shadow: params.to_vec() })
    }

    pub fn update(&mut self, params: &[f64]) {
        let d = self.decay;
        self.shadow.iter_mut().zip(params).for_each(|(s, p)| *s = d * *s + (1.0 - d) * p);
    }
}

/// Per-sample gradients (in parameter registration order) averaged over
/// `views`, each a `(B, C, H, W)` batch holding one augmentation of every
/// sample. Also returns the mean loss over samples and views.
pub fn per_sample_gradients(
    model: &Model,
    views: &[Tensor],
    labels: &[usize],
    f32_rounding: bool,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let k = views.len();
    if k == 0 {
        return Err(Error::InvalidArgument("augmentation multiplicity must be at least 1".into()));
    }
    let b = labels.len();
    let dim = model.count_parameters();
    let offsets: Vec<usize> = model
        .params
        .iter()
        .scan(0, |o, p| {
            let cur = *o;
            *o += p.value.len();
            Some(cur)
        })
        .collect();
    let mut rows = vec![vec![0.0; dim]; b];
    let mut loss = 0.0;
    for view in views {
        if view.shape().first() != Some(&b) {
            return Err(Error::ShapeMismatch(format!("view {:?} for {b} labels", view.shape())));
        }
        let mut g = Graph::new(b).with_f32_rounding(f32_rounding);
        let l = model.loss(&mut g, view.clone(), labels)?;
        loss += g.value(l).sum();
        let grads = g.backward(l)?;
        for (pid, t) in grads.params() {
            let n = model.params.get(pid).value.len();
            for (s, row) in rows.iter_mut().enumerate() {
                let src = &t.data()[s * n..(s + 1) * n];
                row[offsets[pid]..offsets[pid] + n].iter_mut().zip(src).for_each(|(r, v)| *r += v);
            }
        }
    }
    if k > 1 {
        let inv = 1.0 / k as f64;
        rows.iter_mut().flatten().for_each(|v| *v *= inv);
    }
    Ok((rows, loss / (b.max(1) * k) as f64))
}
