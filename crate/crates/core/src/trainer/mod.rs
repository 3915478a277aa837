//! MT pre-finetuning, the multi-task training loop, optimizer and checkpoints.

mod checkpoint;
mod fit;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION, MAGIC};
pub use fit::{fit, mt_validation_loss, pre_finetune_mt, split_corpus, train_step, FitOutcome, LogRecord, Splits};
pub use optim::{lr_at, AdamW};

use std::fmt::Write as _;
use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::decode::DecodeError;
use crate::kv::{KvError, KvMap};
use crate::model::{ComSLModel, ModelError};
use crate::objectives::{LossError, LossReport, LossWeights};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("diverged at step {step} (total {}); last good checkpoint: {last_good:?}", .report.total)]
    Diverged {
        step: usize,
        report: LossReport,
        last_good: Option<PathBuf>,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: LossWeights,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Fraction of `total_steps` during which the speech blocks are frozen.
    pub freeze_fraction: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub validation_every: usize,
    /// Beam width for validation decoding.
    pub beam: usize,
    pub val_fraction: f64,
    /// Validation examples decoded per check; 0 means all.
    pub val_limit: usize,
    pub mt_steps: usize,
    pub mt_lr: f64,
    pub mt_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: LossWeights::default(),
            lr_peak: 5e-3,
            warmup_steps: 200,
            total_steps: 4000,
            freeze_fraction: 1.0 / 3.0,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            seed: 1,
            validation_every: 500,
            beam: 5,
            val_fraction: 0.1,
            val_limit: 200,
            mt_steps: 2500,
            mt_lr: 5e-3,
            mt_warmup: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut issues = Vec::new();
        if let Err(LossError::InvalidWeights(w)) = self.weights.validate() {
            issues.extend(w);
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            issues.push(format!("lr_peak {} must be positive", self.lr_peak));
        }
        if self.warmup_steps >= self.total_steps {
            issues.push(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            issues.push(format!("freeze_fraction {} must lie in [0, 1]", self.freeze_fraction));
        }
        for (name, v) in [("batch_size", self.batch_size), ("validation_every", self.validation_every), ("beam", self.beam)] {
            if v == 0 {
                issues.push(format!("{name} must be positive"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                issues.push(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            issues.push("adam_eps must be positive and weight_decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            issues.push(format!("val_fraction {} must lie in [0, 1)", self.val_fraction));
        }
        if self.mt_steps > 0 && (self.mt_warmup >= self.mt_steps || !(self.mt_lr > 0.0)) {
            issues.push("mt_warmup must be below mt_steps and mt_lr positive".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(issues))
        }
    }

    /// Steps `0..freeze_steps()` keep the speech blocks fixed.
    pub fn freeze_steps(&self) -> usize {
        (self.freeze_fraction * self.total_steps as f64).floor() as usize
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_at(step, self.lr_peak, self.warmup_steps, self.total_steps)
    }

    pub fn write_kv(&self, prefix: &str, out: &mut String) {
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{prefix}{k} = {v}");
        };
        put("lr_peak", self.lr_peak.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("total_steps", self.total_steps.to_string());
        put("freeze_fraction", self.freeze_fraction.to_string());
        put("batch_size", self.batch_size.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("seed", self.seed.to_string());
        put("validation_every", self.validation_every.to_string());
        put("beam", self.beam.to_string());
        put("val_fraction", self.val_fraction.to_string());
        put("val_limit", self.val_limit.to_string());
        put("mt_steps", self.mt_steps.to_string());
        put("mt_lr", self.mt_lr.to_string());
        put("mt_warmup", self.mt_warmup.to_string());
    }

    /// Reads `train.*` keys; loss weights are handled separately.
    pub fn apply_kv(&mut self, prefix: &str, kv: &mut KvMap) -> Result<(), KvError> {
        kv.take_parse(&format!("{prefix}lr_peak"), &mut self.lr_peak)?;
        kv.take_parse(&format!("{prefix}warmup_steps"), &mut self.warmup_steps)?;
        kv.take_parse(&format!("{prefix}total_steps"), &mut self.total_steps)?;
        kv.take_parse(&format!("{prefix}freeze_fraction"), &mut self.freeze_fraction)?;
        kv.take_parse(&format!("{prefix}batch_size"), &mut self.batch_size)?;
        kv.take_parse(&format!("{prefix}beta1"), &mut self.beta1)?;
        kv.take_parse(&format!("{prefix}beta2"), &mut self.beta2)?;
        kv.take_parse(&format!("{prefix}adam_eps"), &mut self.adam_eps)?;
        kv.take_parse(&format!("{prefix}weight_decay"), &mut self.weight_decay)?;
        kv.take_parse(&format!("{prefix}seed"), &mut self.seed)?;
        kv.take_parse(&format!("{prefix}validation_every"), &mut self.validation_every)?;
        kv.take_parse(&format!("{prefix}beam"), &mut self.beam)?;
        kv.take_parse(&format!("{prefix}val_fraction"), &mut self.val_fraction)?;
        kv.take_parse(&format!("{prefix}val_limit"), &mut self.val_limit)?;
        kv.take_parse(&format!("{prefix}mt_steps"), &mut self.mt_steps)?;
        kv.take_parse(&format!("{prefix}mt_lr"), &mut self.mt_lr)?;
        kv.take_parse(&format!("{prefix}mt_warmup"), &mut self.mt_warmup)?;
        Ok(())
    }
}

/// Mutable training state besides the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub step: usize,
    pub seed: u64,
    pub opt: AdamW<T>,
    pub best_bleu: Option<f64>,
    pub best_path: Option<PathBuf>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: &ComSLModel<T>, cfg: &TrainConfig) -> Self {
        TrainState {
            step: 0,
            seed: cfg.seed,
            opt: AdamW::new(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            best_bleu: None,
            best_path: None,
        }
    }
}
