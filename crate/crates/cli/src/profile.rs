use std::fs::File;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use retention_core::cost::{
    attention_cost, count_layer_macs, measure_throughput, write_reports_csv, CostModel, CostReport, ProfileConfig,
};
use retention_core::encoder::{AttentionMode, EncoderConfig, EncoderParams};

use crate::error::Result;

#[derive(Debug, Clone, Serialize)]
pub struct CrossCheck {
    pub mode: AttentionMode,
    pub t: usize,
    pub m: usize,
    pub d: usize,
    pub layers: usize,
    pub closed_form_macs: u64,
    pub counted_macs: u64,
    pub literal_bytes: u64,
    pub memory_units: u64,
    pub equal: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileOutput {
    pub config: ProfileConfig,
    pub reports: Vec<CostReport>,
    pub cross_checks: Vec<CrossCheck>,
}

/// Closed-form attention costs at `(T, ⌊ρT⌋, d, L)` next to the MACs the
/// instrumented tape counts for the same shapes.
pub fn cross_checks(encoder: &EncoderConfig, seed: u64) -> Result<Vec<CrossCheck>> {
    let t = encoder.max_seq_len;
    let m = ((encoder.rho * t as f64 + 1e-9).floor() as usize).clamp(1, t);
    let params = EncoderParams::init(encoder, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let tokens: Vec<usize> = (0..t).map(|i| i % encoder.vocab_size).collect();
    let retained: Vec<usize> = (0..m).map(|i| i * t / m).collect();
    [
        AttentionMode::Dense,
        AttentionMode::MixedFullSparse,
        AttentionMode::RetainedBlock,
    ]
    .into_iter()
    .map(|mode| {
        let model = CostModel {
            t,
            m,
            d: encoder.model_dim,
            layers: encoder.num_layers,
            mode,
        };
        let cost = attention_cost(&model)?;
        let counted = count_layer_macs(&params, encoder, &tokens, &retained, mode)?;
        Ok(CrossCheck {
            mode,
            t,
            m,
            d: encoder.model_dim,
            layers: encoder.num_layers,
            closed_form_macs: cost.flops,
            counted_macs: counted,
            literal_bytes: cost.literal_bytes,
            memory_units: cost.memory_units,
            equal: cost.flops == counted,
        })
    })
    .collect()
}

/// Profiles the dense, gated-unpruned and pruned forwards and writes
/// `profile.csv` (one row per variant) and `profile.json` under `out`.
pub fn run(config: ProfileConfig, out: &Path) -> Result<ProfileOutput> {
    std::fs::create_dir_all(out)?;
    let reports = measure_throughput(&config)?;
    if reports.iter().any(|r| !r.exclusive) {
        log::warn!("another profiling run held the timing lock; timings may be contended");
    }
    let cross_checks = cross_checks(&config.encoder, config.seed)?;
    write_reports_csv(File::create(out.join("profile.csv"))?, &reports)?;
    let output = ProfileOutput {
        config,
        reports,
        cross_checks,
    };
    serde_json::to_writer_pretty(File::create(out.join("profile.json"))?, &output)
        .map_err(retention_core::Error::from)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_match_counts() {
        let encoder = EncoderConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            ff_dim: 16,
            max_seq_len: 20,
            rho: 0.3,
            ..EncoderConfig::default()
        };
        let checks = cross_checks(&encoder, 0).unwrap();
        assert_eq!(checks.len(), 3);
        assert!(checks.iter().all(|c| c.equal), "{checks:?}");
        assert_eq!(checks[0].counted_macs, 2 * 20 * 20 * 8);
        assert_eq!(checks[1].counted_macs, 2 * 20 * 6 * 8);
    }
}
