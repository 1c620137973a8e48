//! The DP-SGD training loop.

use equidp_core::accountant::{calibrate_sigma, Accountant, Conversion};
use equidp_core::dp::{per_sample_gradients, poisson_sample, privatize, sgd_step, Ema};
use equidp_core::layers::{build_eq_resnet9, Model};
use equidp_core::metrics::SparsityTrace;
use equidp_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::augment;
use crate::checkpoint::AccountantState;
use crate::config::{Config, DatasetSourceCfg, NoiseSource, Precision};
use crate::data::{load_cifar10_dir, load_records, stack, synthetic_stream, Dataset, Normalization};
use crate::error::{HarnessError, Result};
use crate::evaluate::{evaluate, EvalReport};

/// Independent generator streams under the run seed.
pub const SAMPLING_STREAM: u64 = 1;
pub const AUGMENT_STREAM: u64 = 2;
pub const NOISE_STREAM: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Train and test splits named by the dataset section.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let k = cfg.model.num_classes;
    let (train, test) = match d.source {
        DatasetSourceCfg::Synthetic => (
            synthetic_stream(d.train_size, k, d.image_size, d.seed, 0)?,
            synthetic_stream(d.test_size, k, d.image_size, d.seed, 1)?,
        ),
        DatasetSourceCfg::Records => {
            let dir = d.path.as_ref().expect("validated");
            (
                load_records(&dir.join("train.bin"), d.image_size, k)?,
                load_records(&dir.join("test.bin"), d.image_size, k)?,
            )
        }
        DatasetSourceCfg::Cifar10 => {
            let (tr, te) = load_cifar10_dir(d.path.as_ref().expect("validated"))?;
            if k != tr.num_classes {
                return Err(HarnessError::Config(format!("CIFAR-10 has {} classes, model.num_classes is {k}", tr.num_classes)));
            }
            (tr, te)
        }
    };
    let train = match d.subset_size {
        Some(n) => train.truncate(n)?,
        None => train,
    };
    Ok((train, test))
}

pub fn normalization_for(cfg: &Config, train: &Dataset) -> Normalization {
    if cfg.dataset.normalize {
        Normalization::fit(train)
    } else {
        Normalization::identity()
    }
}

/// Derived privacy parameters of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyPlan {
    pub sample_rate: f64,
    pub expected_lot: f64,
    pub noise_multiplier: f64,
    /// Budget enforced during training, if one was requested.
    pub target_epsilon: Option<f64>,
}

pub fn plan_privacy(cfg: &Config, n: usize) -> Result<PrivacyPlan> {
    if n == 0 {
        return Err(HarnessError::Config("training set is empty".into()));
    }
    let q = (cfg.optimizer.batch_expected / n as f64).min(1.0);
    let (sigma, target) = match cfg.noise_source() {
        NoiseSource::Explicit(s) => (s, None),
        NoiseSource::Calibrated { target_epsilon, horizon } => {
            (calibrate_sigma(target_epsilon, cfg.privacy.delta, q, horizon, Conversion::Improved)?, Some(target_epsilon))
        }
    };
    Ok(PrivacyPlan { sample_rate: q, expected_lot: q * n as f64, noise_multiplier: sigma, target_epsilon: target })
}

/// RDP ledger that also covers the noiseless case (ε = ∞ after one step).
#[derive(Debug, Clone)]
pub struct Ledger {
    inner: Option<Accountant>,
    q: f64,
    sigma: f64,
    steps: u64,
    delta: f64,
}

impl Ledger {
    pub fn new(q: f64, sigma: f64, delta: f64) -> Result<Self> {
        let inner = if sigma > 0.0 { Some(Accountant::new(q, sigma)?) } else { None };
        Ok(Self { inner, q, sigma, steps: 0, delta })
    }

    pub fn step(&mut self) {
        if let Some(a) = &mut self.inner {
            a.step(1);
        }
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// `(ε, α)`; α is NaN when no order applies.
    pub fn epsilon(&self) -> Result<(f64, f64)> {
        match &self.inner {
            Some(a) => Ok(a.epsilon(self.delta, Conversion::Improved)?),
            None if self.steps == 0 => Ok((0.0, f64::NAN)),
            None => Ok((f64::INFINITY, f64::NAN)),
        }
    }

    pub fn state(&self) -> Result<AccountantState> {
        let (epsilon, order) = self.epsilon()?;
        Ok(AccountantState {
            sample_rate: self.q,
            noise_multiplier: self.sigma,
            steps: self.steps,
            delta: self.delta,
            epsilon,
            order,
        })
    }
}

/// One logged update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub epsilon: f64,
    pub lot: usize,
    pub clipped: f64,
    pub param_l0: f64,
    pub grad_l0: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "step={} loss={:.6} epsilon={:.6} lot={} clipped={:.4} param_l0={:.6} grad_l0={:.6}",
            self.step, self.loss, self.epsilon, self.lot, self.clipped, self.param_l0, self.grad_l0
        )
    }
}

pub struct TrainOutcome {
    /// Final trained values are in `model.params`.
    pub model: Model,
    pub ema: Vec<f64>,
    pub normalization: Normalization,
    pub privacy: PrivacyPlan,
    pub accountant: AccountantState,
    pub logs: Vec<StepLog>,
    /// Test-set metrics of the averaged parameters.
    pub eval: Option<EvalReport>,
}

/// Runs `num_updates` private updates. `on_log` sees every `log_interval`-th
/// step and the last one.
pub fn train(
    cfg: &Config,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    mut on_log: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let threads = if cfg.run.deterministic { 1 } else { cfg.run.threads };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    train_inner(cfg, train_set, test_set, &pool, &mut on_log)
}

fn train_inner(
    cfg: &Config,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    pool: &rayon::ThreadPool,
    on_log: &mut dyn FnMut(&StepLog),
) -> Result<TrainOutcome> {
    if train_set.num_classes != cfg.model.num_classes {
        return Err(HarnessError::Config(format!(
            "dataset has {} classes, model.num_classes is {}",
            train_set.num_classes, cfg.model.num_classes
        )));
    }
    let o = &cfg.optimizer;
    let f32_mode = cfg.numerics.precision == Precision::F32;
    let norm = normalization_for(cfg, train_set);
    let plan = plan_privacy(cfg, train_set.len())?;
    let mut model = build_eq_resnet9(&cfg.resnet(train_set.side)?)?;
    let mut flat = model.params.flatten();
    let dim = flat.len();
    let mut ema = Ema::new(&flat, o.ema_decay)?;
    let mut ledger = Ledger::new(plan.sample_rate, plan.noise_multiplier, cfg.privacy.delta)?;
    let mut sparsity = SparsityTrace::new(cfg.run.sparsity_eps);
    let mut sample_rng = stream_rng(cfg.run.seed, SAMPLING_STREAM);
    let mut aug_rng = stream_rng(cfg.run.seed, AUGMENT_STREAM);
    let mut noise_rng = stream_rng(cfg.run.seed, NOISE_STREAM);
    let mut logs = Vec::new();

    for step in 1..=o.num_updates {
        if let Some(target) = plan.target_epsilon {
            let mut next = ledger.clone();
            next.step();
            let (eps, _) = next.epsilon()?;
            if eps > target {
                return Err(HarnessError::BudgetExceeded { step, epsilon: eps, target });
            }
        }
        let lot = poisson_sample(train_set.len(), plan.sample_rate, &mut sample_rng)?;
        let (rows, loss) = pool.install(|| {
            lot_gradients(&model, train_set, &lot, &norm, o.aug_multiplicity, cfg.run.micro_batch, f32_mode, &mut aug_rng)
        })?;
        let (update, stats) = privatize(&rows, dim, o.clip_norm, plan.noise_multiplier, plan.expected_lot, &mut noise_rng)?;
        drop(rows);
        sgd_step(&mut flat, &update, o.learning_rate);
        model.params.assign_flat(&flat)?;
        ema.update(&flat);
        ledger.step();
        if step % cfg.run.log_interval == 0 || step == o.num_updates || step == 1 {
            let rec = sparsity.record(step, &flat, &update)?;
            let log = StepLog {
                step,
                loss,
                epsilon: ledger.epsilon()?.0,
                lot: stats.lot_size,
                clipped: stats.clipped_fraction,
                param_l0: rec.param_fraction,
                grad_l0: rec.grad_fraction,
            };
            on_log(&log);
            logs.push(log);
        }
    }

    let eval = match test_set {
        Some(t) => {
            model.params.assign_flat(&ema.shadow)?;
            let r = pool.install(|| evaluate(&model, t, &norm, cfg.run.micro_batch, f32_mode))?;
            model.params.assign_flat(&flat)?;
            Some(r)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        ema: ema.shadow,
        normalization: norm,
        privacy: plan,
        accountant: ledger.state()?,
        logs,
        eval,
    })
}

/// Per-sample gradients of one lot, averaged over `multiplicity` views (the
/// original image and `multiplicity - 1` random augmentations), plus the
/// mean loss. Augmentations are drawn sequentially so results do not depend
/// on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn lot_gradients(
    model: &Model,
    data: &Dataset,
    lot: &[usize],
    norm: &Normalization,
    multiplicity: usize,
    micro_batch: usize,
    f32_mode: bool,
    aug_rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, f64)> {
    if lot.is_empty() {
        return Ok((Vec::new(), f64::NAN));
    }
    let chunks: Vec<&[usize]> = lot.chunks(micro_batch.max(1)).collect();
    let mut views: Vec<Vec<Tensor>> = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let mut v = vec![data.batch(c, norm)?];
        for _ in 1..multiplicity {
            let aug: Vec<Vec<f32>> = c.iter().map(|&i| augment(data.image(i), data.side, aug_rng)).collect();
            let refs: Vec<&[f32]> = aug.iter().map(Vec::as_slice).collect();
            v.push(stack(&refs, data.side, norm)?);
        }
        views.push(v);
    }
    let parts = chunks
        .par_iter()
        .zip(views.par_iter())
        .map(|(c, v)| per_sample_gradients(model, v, &data.labels_of(c), f32_mode))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(lot.len());
    let mut loss = 0.0;
    for ((r, l), c) in parts.into_iter().zip(&chunks) {
        loss += l * c.len() as f64;
        rows.extend(r);
    }
    Ok((rows, loss / lot.len() as f64))
}
