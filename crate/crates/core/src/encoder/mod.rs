//! Transformer encoder with retention gates between blocks.
//!
//! Training keeps every token and scales hidden rows by relaxed gates.
//! Inference keeps the top-`M_l` tokens at each gating point and physically
//! removes the rest, so later blocks attend over a shorter sequence.

mod forward;
mod params;
#[cfg(test)]
mod tests;

pub use forward::{
    argmax, attention_layer, forward_infer, forward_train, forward_ungated, random_nested_masks, AttentionMode,
    GateSource, InferenceOutput, LayerTrace, Selector, TrainOutput,
};
pub use params::{BlockParams, BlockVars, EncoderParams, EncoderVars};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionMode {
    /// One gate on the final hidden states.
    OutputGating,
    /// A gate after every block.
    LayerWise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    UniformGlobal,
    Geometric,
    LinearDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanOverRetained,
    FirstRetained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub retention_mode: RetentionMode,
    pub schedule_mode: ScheduleMode,
    pub rho: f64,
    /// Retained fractions at the first and last gate under `linear_decay`.
    pub schedule_endpoints: (f64, f64),
    pub pooling: Pooling,
    pub decay_gamma: f64,
    pub positional_encoding: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            num_heads: 4,
            ff_dim: 128,
            vocab_size: 64,
            max_seq_len: 64,
            num_classes: 4,
            retention_mode: RetentionMode::LayerWise,
            schedule_mode: ScheduleMode::UniformGlobal,
            rho: 0.3,
            schedule_endpoints: (0.452, 0.385),
            pooling: Pooling::MeanOverRetained,
            decay_gamma: 0.9,
            positional_encoding: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.model_dim == 0 || self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return fail(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.ff_dim == 0 || self.max_seq_len == 0 {
            return fail("ff_dim and max_seq_len must be positive".into());
        }
        if self.vocab_size < 2 || self.num_classes < 2 {
            return fail("vocab_size and num_classes must be at least 2".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return fail(format!("rho {} must lie in (0, 1]", self.rho));
        }
        let (a, b) = self.schedule_endpoints;
        if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
            return fail(format!("schedule endpoints ({a}, {b}) must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.decay_gamma) {
            return fail(format!("decay_gamma {} must lie in [0, 1]", self.decay_gamma));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Number of places where tokens are scored and gated.
    pub fn gating_points(&self) -> usize {
        match self.retention_mode {
            RetentionMode::OutputGating => 1,
            RetentionMode::LayerWise => self.num_layers,
        }
    }
}

/// `⌊x⌋` with a small allowance so that products such as `0.3 × 10` land on
/// the intended integer.
fn floor_count(x: f64) -> usize {
    (x + 1e-9).floor().max(0.0) as usize
}

/// Retained fraction at each of `n` gates, interpolated linearly between the
/// endpoints.
pub fn linear_decay_fractions(n: usize, endpoints: (f64, f64)) -> Vec<f64> {
    let (start, end) = endpoints;
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|l| start + (end - start) * l as f64 / (n - 1) as f64)
        .collect()
}

/// Tokens kept at each gating point for a sequence of length `t`.
///
/// `rho = 1` keeps every token in every mode.
pub fn retention_schedule(t: usize, config: &EncoderConfig) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::contract("retention_schedule: empty sequence"));
    }
    config.validate()?;
    let n = config.gating_points();
    if config.rho >= 1.0 {
        return Ok(vec![t; n]);
    }
    let counts = match config.schedule_mode {
        ScheduleMode::UniformGlobal => vec![floor_count(config.rho * t as f64).max(1); n],
        ScheduleMode::Geometric => {
            let mut alive = t;
            (0..n)
                .map(|_| {
                    alive = floor_count(config.rho * alive as f64).max(1);
                    alive
                })
                .collect()
        }
        ScheduleMode::LinearDecay => {
            let mut prev = t;
            linear_decay_fractions(n, config.schedule_endpoints)
                .into_iter()
                .map(|f| {
                    prev = floor_count(f * t as f64).clamp(1, prev);
                    prev
                })
                .collect()
        }
    };
    Ok(counts)
}
