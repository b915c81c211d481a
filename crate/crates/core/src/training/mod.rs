//! Optimizer, learning-rate schedules, and the pre-training, continued
//! pre-training and fine-tuning loops.

mod loops;
mod optim;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loops::{
    continue_pretraining, evaluate_mlm, finetune, masked_perplexity, pretrain_mlm, FinetuneOutcome,
    LabeledExample, MlmEval, PretrainOutcome, Target,
};
pub use optim::{clip_grad_norm, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use schedule::{lr_at, ScheduleKind, ScheduleSpec, Warmup};

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    pub warmup: Warmup,
    pub peak_lr: f64,
    /// Learning rate reached at the final step.
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    /// Worker threads for tensor kernels; 0 keeps the global pool.
    pub threads: usize,
    /// Cap on optimizer steps; `None` runs every epoch to completion.
    pub max_steps: Option<u64>,
}

impl TrainRunConfig {
    /// Full-scale pre-training: 1 epoch, batch 64, weight decay 0.01,
    /// 20,000 warmup steps to a 5e-5 peak, then linear decay.
    pub fn pretrain_defaults() -> Self {
        TrainRunConfig {
            batch_size: 64,
            epochs: 1,
            seed: 42,
            schedule: ScheduleKind::WarmupLinear,
            warmup: Warmup::Steps(20_000),
            peak_lr: 5e-5,
            lr_floor: 0.0,
            weight_decay: 0.01,
            grad_clip: None,
            threads: 0,
            max_steps: None,
        }
    }

    /// Fine-tuning: 10 epochs, batch 32, weight decay 0.01, warmup over 30%
    /// of all steps to a 3e-5 peak, then cosine annealing.
    pub fn finetune_defaults() -> Self {
        TrainRunConfig {
            batch_size: 32,
            epochs: 10,
            seed: 42,
            schedule: ScheduleKind::WarmupCosine,
            warmup: Warmup::Fraction(0.3),
            peak_lr: 3e-5,
            lr_floor: 0.0,
            weight_decay: 0.01,
            grad_clip: None,
            threads: 0,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!(
                "weight decay {} must be ≥ 0",
                self.weight_decay
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }

    /// Optimizer steps for `examples` inputs; the last batch of an epoch
    /// may be short.
    pub fn total_steps(&self, examples: usize) -> u64 {
        let per_epoch = examples.div_ceil(self.batch_size) as u64;
        let full = per_epoch * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule_for(&self, total_steps: u64) -> Result<ScheduleSpec> {
        let spec = ScheduleSpec {
            kind: self.schedule,
            warmup: self.warmup,
            peak: self.peak_lr,
            total_steps,
            floor: self.lr_floor,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based optimizer step within the run.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch.
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub train_loss: f64,
    /// Accuracy (percent) over the epoch's training batches, dropout on.
    pub train_accuracy: f64,
    pub dev_metric: Option<f64>,
}

/// One line of a history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryLine {
    Step(StepRecord),
    Epoch(EpochRecord),
}

/// Append records as JSON lines.
pub fn append_history(path: &Path, lines: &[HistoryLine]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for l in lines {
        buf.push_str(&serde_json::to_string(l).expect("history serializes"));
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryLine>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::data(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
