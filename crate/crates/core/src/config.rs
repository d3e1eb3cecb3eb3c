//! Run configuration with a strict JSON schema.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::budget::BudgetConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gate::HardConcreteParams;
use crate::optim::OptimizerConfig;
use crate::tasks::NeedleConfig;

/// How tokens are gated while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Learned scorer with Hard-Concrete gates and a budget multiplier.
    Adaptive,
    /// Uniformly random hard masks of the scheduled size, in training and
    /// at inference.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated needle data; the eval split uses a seed derived from the
    /// run seed.
    Needle {
        task: NeedleConfig,
        train_examples: usize,
        eval_examples: usize,
    },
    /// JSONL files in the needle schema.
    Files { train: String, eval: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub budget: BudgetConfig,
    pub hard_concrete: HardConcreteParams,
    pub optimizer: OptimizerConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub data: DataConfig,
    pub output_dir: Option<String>,
    pub log_every: u64,
    /// Wall-clock time in metrics; off by default so that metrics files are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

/// Dual step for the desk needle task. Violations here are counted in
/// tokens (about 20 at the start), so the larger full-scale step drives
/// every gate into the clamped-off region within a few dozen steps.
pub const DESK_ETA: f64 = 2e-5;
/// Steps of task-only training before the multiplier starts moving.
pub const DESK_WARMUP_STEPS: u64 = 256;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            budget: BudgetConfig {
                eta: DESK_ETA,
                warmup_steps: DESK_WARMUP_STEPS,
                ..BudgetConfig::default()
            },
            hard_concrete: HardConcreteParams::default(),
            optimizer: OptimizerConfig::default(),
            strategy: Strategy::Adaptive,
            seed: 0,
            data: DataConfig::Needle {
                task: NeedleConfig::default(),
                train_examples: 2048,
                eval_examples: 512,
            },
            output_dir: None,
            log_every: 50,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.budget.validate()?;
        self.hard_concrete.validate()?;
        self.optimizer.validate()?;
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        if let DataConfig::Needle {
            task,
            train_examples,
            eval_examples,
        } = &self.data
        {
            task.validate()?;
            if *train_examples == 0 || *eval_examples == 0 {
                return Err(Error::config("train and eval splits must be non-empty"));
            }
            if task.vocab_size > self.encoder.vocab_size {
                return Err(Error::config(format!(
                    "task vocabulary {} exceeds encoder vocab_size {}",
                    task.vocab_size, self.encoder.vocab_size
                )));
            }
            if task.seq_len > self.encoder.max_seq_len {
                return Err(Error::config(format!(
                    "task seq_len {} exceeds encoder max_seq_len {}",
                    task.seq_len, self.encoder.max_seq_len
                )));
            }
            if task.num_classes != self.encoder.num_classes {
                return Err(Error::config(format!(
                    "task has {} classes but encoder predicts {}",
                    task.num_classes, self.encoder.num_classes
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
