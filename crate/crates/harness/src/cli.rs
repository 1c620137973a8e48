//! Command-line front end. Every command writes `key=value` lines.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use equidp_core::accountant::{Accountant, Conversion};
use equidp_core::layers::build_eq_resnet9;

use crate::audit::{audit, inject_kernel_fault};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, Precision};
use crate::data::{synthetic_stream, write_records};
use crate::error::{HarnessError, Result};
use crate::evaluate::evaluate;
use crate::train::{load_data, train};

#[derive(Debug, Parser)]
#[command(name = "equidp", about = "Equivariant CNNs trained with differential privacy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long)]
    pub deterministic: bool,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<Config> {
        let mut cfg = Config::load(&self.config, &self.overrides)?;
        cfg.run.deterministic |= self.deterministic;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split named by its configuration.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate the trained values instead of their moving average.
        #[arg(long)]
        raw: bool,
    },
    /// Audit equivariance of a freshly built or checkpointed model.
    CheckEquivariance {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Corrupt the n-th convolution before auditing (self-test).
        #[arg(long)]
        inject_fault: Option<usize>,
    },
    /// ε for given sampling parameters, or recomputed from a checkpoint.
    Accountant {
        #[arg(long, conflicts_with = "checkpoint")]
        sample_rate: Option<f64>,
        #[arg(long)]
        noise_multiplier: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Use the classic RDP conversion instead of the improved one.
        #[arg(long)]
        classic: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Number of trainable parameters.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write synthetic oriented-shape splits as `train.bin` and `test.bin`.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 1000)]
        test: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out: dir } => {
            let cfg = cfg.load()?;
            let (tr, te) = load_data(&cfg)?;
            let mut io_err = None;
            let outcome = train(&cfg, &tr, Some(&te), |log| {
                if let Err(e) = writeln!(out, "{log}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            writeln!(
                out,
                "sample_rate={:.6} noise_multiplier={:.6} expected_lot={:.2}",
                outcome.privacy.sample_rate, outcome.privacy.noise_multiplier, outcome.privacy.expected_lot
            )?;
            if let Some(ev) = outcome.eval {
                writeln!(out, "test {ev}")?;
            }
            let ck = Checkpoint::capture(&cfg, &outcome.model, &outcome.ema, &outcome.normalization, outcome.accountant)?;
            let (m, _) = ck.save(&dir)?;
            writeln!(out, "checkpoint={}", m.display())?;
        }
        Command::Evaluate { checkpoint, raw } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = &ck.manifest.config;
            let model = ck.model(if raw { "param" } else { "ema" })?;
            let (_, te) = load_data(cfg)?;
            let r = evaluate(&model, &te, &ck.normalization()?, cfg.run.micro_batch, cfg.numerics.precision == Precision::F32)?;
            writeln!(out, "{r}")?;
        }
        Command::CheckEquivariance { config, overrides, checkpoint, batch, inject_fault } => {
            let (mut model, seed) = match (config, checkpoint) {
                (_, Some(dir)) => {
                    let ck = Checkpoint::load(&dir)?;
                    (ck.model("param")?, ck.manifest.config.run.seed)
                }
                (Some(path), None) => {
                    let cfg = Config::load(&path, &overrides)?;
                    (build_eq_resnet9(&cfg.resnet(cfg.input_side())?)?, cfg.run.seed)
                }
                (None, None) => return Err(HarnessError::Config("pass --config or --checkpoint".into())),
            };
            if let Some(i) = inject_fault {
                let name = inject_kernel_fault(&mut model, i, 1.0, seed)?;
                writeln!(out, "injected_fault={name}")?;
            }
            let report = audit(&mut model, batch, seed)?;
            for l in report.lines() {
                writeln!(out, "{l}")?;
            }
            writeln!(
                out,
                "max_layer_error={:.3e} max_logit_error={:.3e} passed={}",
                report.max_layer_error(),
                report.max_logit_error(),
                report.passed()
            )?;
            report.into_result()?;
        }
        Command::Accountant { sample_rate, noise_multiplier, steps, delta, classic, checkpoint } => {
            let conv = if classic { Conversion::Classic } else { Conversion::Improved };
            if let Some(dir) = checkpoint {
                let st = Checkpoint::load(&dir)?.manifest.accountant;
                let (eps, order) = st.to_epsilon()?;
                writeln!(out, "epsilon={eps:.6} order={order} steps={} stored_epsilon={:.6}", st.steps, st.epsilon)?;
                return Ok(());
            }
            let (Some(q), Some(s), Some(t)) = (sample_rate, noise_multiplier, steps) else {
                return Err(HarnessError::Config("--sample-rate, --noise-multiplier and --steps are required".into()));
            };
            let mut a = Accountant::new(q, s)?;
            a.step(t);
            let (eps, order) = a.epsilon(delta, conv)?;
            writeln!(out, "epsilon={eps:.6} order={order}")?;
            for (&alpha, &rho) in a.orders().iter().zip(a.rho()) {
                writeln!(out, "order={alpha} rdp={rho:.6e} epsilon={:.6}", conv.epsilon(rho, alpha, delta))?;
            }
        }
        Command::ParamCount { cfg } => {
            let cfg = cfg.load()?;
            let model = build_eq_resnet9(&cfg.resnet(cfg.input_side())?)?;
            writeln!(out, "parameters={}", model.count_parameters())?;
        }
        Command::GenSynthetic { out: dir, train, test, side, classes, seed } => {
            std::fs::create_dir_all(&dir)?;
            write_records(&dir.join("train.bin"), &synthetic_stream(train, classes, side, seed, 0)?)?;
            write_records(&dir.join("test.bin"), &synthetic_stream(test, classes, side, seed, 1)?)?;
            writeln!(out, "train={train} test={test} side={side} classes={classes} dir={}", dir.display())?;
        }
    }
    Ok(())
}
