//! Attention cost model, instrumented MAC counts, wall-clock throughput and
//! per-layer retention tables.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    attention_layer, forward_infer, forward_ungated, retention_schedule, AttentionMode, EncoderConfig, EncoderParams,
    RetentionMode, Selector,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub t: usize,
    pub m: usize,
    pub d: usize,
    pub layers: usize,
    pub mode: AttentionMode,
}

/// Leading-term attention costs summed over layers, constants taken as 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCost {
    /// Query-key score MACs.
    pub flops: u64,
    /// Memory in the units of the complexity model (entries × d).
    pub memory_units: u64,
    /// Literal bytes: f64 score matrix plus query, key and value buffers.
    pub literal_bytes: u64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.m > self.t || self.d == 0 || self.layers == 0 {
            return Err(Error::contract(format!(
                "invalid cost model {self:?}: need 1 ≤ M ≤ T, d ≥ 1, L ≥ 1"
            )));
        }
        Ok(())
    }
}

pub fn attention_cost(model: &CostModel) -> Result<AttentionCost> {
    model.validate()?;
    let (t, m, d, l) = (model.t as u64, model.m as u64, model.d as u64, model.layers as u64);
    let (queries, keys, mem_rows) = match model.mode {
        AttentionMode::Dense => (t, t, t),
        AttentionMode::RetainedBlock => (m, m, m),
        AttentionMode::MixedFullSparse => (t, m, m),
    };
    Ok(AttentionCost {
        flops: l * queries * keys * d,
        memory_units: l * mem_rows * mem_rows * d,
        literal_bytes: l * 8 * (queries * keys + (queries + 2 * keys) * d),
    })
}

/// Score-stage MACs recorded on `tape` so far.
pub fn count_actual_flops(tape: &Tape) -> u64 {
    tape.counters().attention_score_macs
}

/// Runs every block of `params` under one attention regime, with
/// `retained` the kept rows, and returns the score MACs the tape counted.
pub fn count_layer_macs(
    params: &EncoderParams,
    config: &EncoderConfig,
    tokens: &[usize],
    retained: &[usize],
    mode: AttentionMode,
) -> Result<u64> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape)?;
    let mut x = tape.gather_rows(vars.embedding, tokens)?;
    let mut kept = retained.to_vec();
    for bv in &vars.blocks {
        x = attention_layer(&mut tape, bv, config.num_heads, x, &kept, mode)?;
        if mode == AttentionMode::RetainedBlock {
            // the block already dropped the unretained rows
            kept = (0..retained.len()).collect();
        }
    }
    Ok(count_actual_flops(&tape))
}

/// Rows entering each block under pruned inference.
fn rows_per_layer(t: usize, config: &EncoderConfig) -> Result<Vec<usize>> {
    let schedule = retention_schedule(t, config)?;
    Ok((0..config.num_layers)
        .map(|l| match config.retention_mode {
            RetentionMode::LayerWise if l > 0 => schedule[l - 1],
            _ => t,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileVariant {
    /// The encoder with every gate removed.
    Dense,
    /// Scores computed at every gating point, nothing pruned.
    GatedUnpruned,
    /// Top-M pruning at the configured ratio.
    Pruned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    /// Sequences are `max_seq_len` tokens long.
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub timed_batches: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                num_layers: 4,
                model_dim: 64,
                num_heads: 4,
                ff_dim: 256,
                max_seq_len: 512,
                rho: 0.3,
                ..EncoderConfig::default()
            },
            batch_size: 2,
            warmup_batches: 5,
            timed_batches: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: ProfileVariant,
    pub seq_len: usize,
    pub rho: f64,
    pub batch_size: usize,
    /// Score-stage MACs per batch, counted.
    pub flop_count: u64,
    /// Complexity-model memory units per sequence.
    pub memory_units: u64,
    pub wall_seconds_per_batch: f64,
    pub median_seconds_per_batch: f64,
    pub tokens_per_second: f64,
    pub seconds_per_1k_tokens: f64,
    /// Dense mean time over this variant's mean time.
    pub relative_throughput: f64,
    pub relative_throughput_median: f64,
    /// Largest tape allocation for one sequence.
    pub peak_resident_bytes: usize,
    /// Batches run back to back per timing sample.
    pub grouped_batches: usize,
    /// No other profiling run held the timing lock when this one started.
    pub exclusive: bool,
}

static TIMING_LOCK: Mutex<()> = Mutex::new(());
const MIN_SAMPLE: Duration = Duration::from_millis(1);

struct RunStats {
    flops: u64,
    peak: usize,
}

fn run_batch(
    variant: ProfileVariant,
    params: &EncoderParams,
    config: &EncoderConfig,
    batch: &[Vec<usize>],
) -> Result<RunStats> {
    let unpruned = EncoderConfig {
        rho: 1.0,
        ..config.clone()
    };
    let mut stats = RunStats { flops: 0, peak: 0 };
    for tokens in batch {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        match variant {
            ProfileVariant::Dense => {
                forward_ungated(&mut tape, &vars, config, tokens, None)?;
            }
            ProfileVariant::GatedUnpruned => {
                forward_infer(&mut tape, &vars, &unpruned, tokens, Selector::Scored)?;
            }
            ProfileVariant::Pruned => {
                forward_infer(&mut tape, &vars, config, tokens, Selector::Scored)?;
            }
        }
        stats.flops += count_actual_flops(&tape);
        stats.peak = stats.peak.max(tape.stored_bytes());
    }
    Ok(stats)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times the dense, gated-unpruned and pruned forwards on the same random
/// batches. Variants are interleaved batch by batch so slow drift in clock
/// speed affects all three alike. Batches faster than 1 ms are repeated
/// back to back until a sample is measurable.
pub fn measure_throughput(config: &ProfileConfig) -> Result<Vec<CostReport>> {
    config.encoder.validate()?;
    if config.batch_size == 0 || config.timed_batches == 0 {
        return Err(Error::config("batch_size and timed_batches must be positive"));
    }
    let (guard, exclusive) = match TIMING_LOCK.try_lock() {
        Ok(g) => (g, true),
        Err(_) => (TIMING_LOCK.lock().unwrap_or_else(|e| e.into_inner()), false),
    };
    let enc = &config.encoder;
    let t = enc.max_seq_len;
    let params = EncoderParams::init(enc, &mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let batches: Vec<Vec<Vec<usize>>> = (0..config.warmup_batches + config.timed_batches)
        .map(|_| {
            (0..config.batch_size)
                .map(|_| (0..t).map(|_| rng.gen_range(0..enc.vocab_size)).collect())
                .collect()
        })
        .collect();
    let variants = [
        ProfileVariant::Dense,
        ProfileVariant::GatedUnpruned,
        ProfileVariant::Pruned,
    ];
    let mut last = Vec::new();
    for batch in &batches[..config.warmup_batches] {
        last.clear();
        for v in variants {
            last.push(run_batch(v, &params, enc, batch)?);
        }
    }
    // grow the group until the slowest-to-measure variant takes a millisecond
    let mut group = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..group {
            run_batch(ProfileVariant::Pruned, &params, enc, &batches[0])?;
        }
        if start.elapsed() >= MIN_SAMPLE {
            break;
        }
        group *= 2;
    }
    let mut times = vec![Vec::with_capacity(config.timed_batches); variants.len()];
    let mut stats: Vec<Option<RunStats>> = (0..variants.len()).map(|_| None).collect();
    for batch in &batches[config.warmup_batches..] {
        for (i, &v) in variants.iter().enumerate() {
            let start = Instant::now();
            let mut s = None;
            for _ in 0..group {
                s = Some(run_batch(v, &params, enc, batch)?);
            }
            times[i].push(start.elapsed().as_secs_f64() / group as f64);
            let s = s.expect("group is at least 1");
            let slot = &mut stats[i];
            match slot {
                Some(prev) => prev.peak = prev.peak.max(s.peak),
                None => *slot = Some(s),
            }
        }
    }
    drop(guard);
    let means: Vec<f64> = times
        .iter()
        .map(|ts| ts.iter().sum::<f64>() / ts.len() as f64)
        .collect();
    let medians: Vec<f64> = times.iter().map(|ts| median(ts)).collect();
    let tokens_per_batch = (config.batch_size * t) as f64;
    let pruned_rows = rows_per_layer(t, enc)?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(i, &variant)| {
            let s = stats[i].as_ref().expect("timed at least once");
            let (rho, memory_units) = match variant {
                ProfileVariant::Pruned => (
                    enc.rho,
                    pruned_rows.iter().map(|&r| (r * r * enc.model_dim) as u64).sum(),
                ),
                _ => (1.0, (enc.num_layers * t * t * enc.model_dim) as u64),
            };
            CostReport {
                variant,
                seq_len: t,
                rho,
                batch_size: config.batch_size,
                flop_count: s.flops,
                memory_units,
                wall_seconds_per_batch: means[i],
                median_seconds_per_batch: medians[i],
                tokens_per_second: tokens_per_batch / means[i],
                seconds_per_1k_tokens: means[i] * 1000.0 / tokens_per_batch,
                relative_throughput: means[0] / means[i],
                relative_throughput_median: medians[0] / medians[i],
                peak_resident_bytes: s.peak,
                grouped_batches: group,
                exclusive,
            }
        })
        .collect())
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[CostReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned plain-text table of retained fractions: one row per gating point
/// after an embedding row, and a Full/Adaptive column pair per budget.
pub fn format_retention_table(config: &EncoderConfig, table: &[(f64, Vec<f64>)]) -> String {
    let mut out = String::new();
    let label_width = 11;
    out.push_str(&format!("{:<label_width$}", "Layer"));
    for (rho, _) in table {
        out.push_str(&format!(" | {:^17}", format!("{:.0}% Budget", rho * 100.0)));
    }
    out.push('\n');
    out.push_str(&format!("{:<label_width$}", ""));
    for _ in table {
        out.push_str(&format!(" | {:>7} {:>9}", "Full", "Adaptive"));
    }
    out.push('\n');
    let rows = table.first().map_or(0, |(_, r)| r.len());
    for i in 0..rows {
        let label = if i == 0 {
            "Embedding".to_owned()
        } else {
            match config.retention_mode {
                RetentionMode::LayerWise => format!("Layer {i}"),
                RetentionMode::OutputGating => format!("Layer {}", config.num_layers),
            }
        };
        out.push_str(&format!("{label:<label_width$}"));
        for (_, r) in table {
            out.push_str(&format!(" | {:>6.1}% {:>8.1}%", 100.0, r[i] * 100.0));
        }
        out.push('\n');
    }
    out
}
