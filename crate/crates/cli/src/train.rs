use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use retention_core::checkpoint::{write_checkpoint, Checkpoint};
use retention_core::config::RunConfig;
use retention_core::metrics::{MetricsRecord, MetricsWriter};
use retention_core::train::{load_data, Trainer};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub last: Option<MetricsRecord>,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct AbortEvent<'a> {
    event: &'static str,
    step: u64,
    message: &'a str,
}

fn save(trainer: &Trainer, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        encoder: trainer.config.encoder.clone(),
        params: trainer.params.clone(),
        step: trainer.step(),
        lambda: trainer.lagrange.lambda(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, &ckpt)?;
    Ok(())
}

/// Trains under `config`, writing the resolved config, metrics and a final
/// checkpoint into `out`.
pub fn run(config: RunConfig, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), config.to_json()?)?;
    let (train, eval) = load_data(&config)?;
    let mut trainer = Trainer::new(config)?;
    let mut metrics = MetricsWriter::create(out)?;
    let mut last = None;
    let checkpoint = out.join("checkpoint.bin");
    let fit = trainer.fit(&train, &eval, |record, _| {
        metrics.write(record)?;
        log::info!(
            "step {} loss {:.4} λ {:.4} E[retained] {:.2} acc {:.3} recall {:.3}",
            record.step,
            record.task_loss,
            record.lambda,
            record.expected_retention,
            record.eval_accuracy,
            record.retention_recall
        );
        last = Some(record.clone());
        Ok(())
    });
    if let Err(e) = fit {
        if !matches!(e, retention_core::Error::NonFinite { .. }) {
            return Err(e.into());
        }
        // the failed step left the parameters untouched
        save(&trainer, &checkpoint)?;
        let message = e.to_string();
        metrics.write_event(&AbortEvent {
            event: "numeric_abort",
            step: trainer.step(),
            message: &message,
        })?;
        metrics.finish()?;
        return Err(CliError::NumericAbort {
            step: trainer.step(),
            checkpoint,
            source: e,
        });
    }
    metrics.finish()?;
    save(&trainer, &checkpoint)?;
    Ok(TrainSummary {
        steps: trainer.step(),
        last,
        checkpoint,
    })
}
