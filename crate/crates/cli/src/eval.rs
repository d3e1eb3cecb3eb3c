use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::Serialize;

use retention_core::checkpoint::{config_mismatch, read_checkpoint, Checkpoint};
use retention_core::config::RunConfig;
use retention_core::cost::format_retention_table;
use retention_core::encoder::EncoderConfig;
use retention_core::train::{eval_selector, evaluate, evaluate_ungated, load_data, EvalReport};

use crate::error::{CliError, Result};

pub const DEFAULT_BUDGETS: [f64; 3] = [0.3, 0.5, 1.0];

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutput {
    pub step: u64,
    pub examples: usize,
    pub ungated_accuracy: f64,
    pub reports: Vec<EvalReport>,
    pub retention_table: String,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| retention_core::Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(read_checkpoint(BufReader::new(file))?)
}

/// Fails with the names of every encoder field on which the run config and
/// the checkpoint disagree. The retention ratio is exempt: it is chosen per
/// evaluation.
pub fn check_compatible(config: &EncoderConfig, ckpt: &EncoderConfig) -> Result<()> {
    let normalized = EncoderConfig {
        rho: ckpt.rho,
        ..config.clone()
    };
    let fields = config_mismatch(&normalized, ckpt);
    if fields.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "config and checkpoint disagree on encoder fields: {}",
            fields.join(", ")
        )))
    }
}

pub fn run(config: &RunConfig, ckpt: &Checkpoint, budgets: &[f64]) -> Result<EvalOutput> {
    check_compatible(&config.encoder, &ckpt.encoder)?;
    let (_, data) = load_data(config)?;
    let selector = eval_selector(config);
    let reports = budgets
        .iter()
        .map(|&rho| evaluate(&ckpt.params, &ckpt.encoder, &data, rho, selector))
        .collect::<retention_core::Result<Vec<_>>>()?;
    let table: Vec<(f64, Vec<f64>)> = reports
        .iter()
        .map(|r| {
            let mut rows = vec![1.0];
            rows.extend(&r.layer_fractions);
            (r.rho, rows)
        })
        .collect();
    Ok(EvalOutput {
        step: ckpt.step,
        examples: data.len(),
        ungated_accuracy: evaluate_ungated(&ckpt.params, &ckpt.encoder, &data)?,
        retention_table: format_retention_table(&ckpt.encoder, &table),
        reports,
    })
}
