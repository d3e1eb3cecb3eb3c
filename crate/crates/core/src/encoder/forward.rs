use serde::{Deserialize, Serialize};

use super::{retention_schedule, BlockVars, EncoderConfig, EncoderVars, Pooling, RetentionMode};
use crate::error::{Error, Result};
use crate::gate::{sample_hard_concrete_on_tape, score_tokens_on_tape, select_top_m, HardConcreteParams};
use crate::rng::NoiseKey;
use crate::tensor::{Activation, Tape, Var};

/// Which rows take part in an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// All tokens attend to all tokens.
    Dense,
    /// Only retained tokens are present, as queries and as keys.
    RetainedBlock,
    /// Every token queries, only retained tokens serve as keys and values.
    MixedFullSparse,
}

/// Where training-time gates come from.
#[derive(Clone, Copy, Debug)]
pub enum GateSource<'a> {
    /// Hard-Concrete samples driven by the keyed noise stream of
    /// `(seed, step, gate index, slot)`.
    Sampled {
        seed: u64,
        step: u64,
        slot: u32,
        hc: HardConcreteParams,
    },
    /// Given gate values, one vector per gating point.
    Fixed(&'a [Vec<f64>]),
    /// Hard masks applied to the input of a block instead of its output:
    /// mask `g` is applied before the block that gating point `g` follows,
    /// so the first mask acts on the embeddings.
    InputMasks(&'a [Vec<f64>]),
}

/// How tokens are chosen at inference.
#[derive(Clone, Copy, Debug)]
pub enum Selector {
    /// Top-`M_l` retention probabilities.
    Scored,
    /// A uniformly random subset of the scheduled size, dropped before the
    /// block rather than after it, so pruned tokens are never seen.
    Random { seed: u64, slot: u32 },
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub loss: Var,
    pub logits: Var,
    /// Retention logits at each gating point (T×1).
    pub scores: Vec<Var>,
    /// Retention probabilities at each gating point (T×1).
    pub probs: Vec<Var>,
    /// Gate values applied at each gating point (T×1).
    pub gates: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Original positions kept after this gate, increasing.
    pub active_indices: Vec<usize>,
    pub retained: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub logits: Vec<f64>,
    pub prediction: usize,
    pub trace: Vec<LayerTrace>,
}

fn check_tokens(config: &EncoderConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn check_label(config: &EncoderConfig, label: usize) -> Result<()> {
    if label >= config.num_classes {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            config.num_classes
        )));
    }
    Ok(())
}

fn sinusoid(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn embed(tape: &mut Tape, vars: &EncoderVars, config: &EncoderConfig, tokens: &[usize]) -> Result<Var> {
    let x = tape.gather_rows(vars.embedding, tokens)?;
    if !config.positional_encoding {
        return Ok(x);
    }
    let pe = tape.constant(tokens.len(), config.model_dim, sinusoid(tokens.len(), config.model_dim))?;
    tape.add(x, pe)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head scaled dot-product attention. Rows of `xq` query the rows of
/// `xkv`; `key_weights` (one per key row) rescale each key's share.
fn attention(
    tape: &mut Tape,
    bv: &BlockVars,
    heads: usize,
    xq: Var,
    xkv: Var,
    key_weights: Option<Var>,
) -> Result<Var> {
    let d = tape.dims(xq).1;
    let dh = d / heads;
    let q = affine(tape, xq, bv.wq, bv.bq)?;
    let k = affine(tape, xkv, bv.wk, bv.bk)?;
    let v = affine(tape, xkv, bv.wv, bv.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.attention_scores(qh, kh)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scaled, key_weights)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    affine(tape, joined, bv.wo, bv.bo)
}

fn feed_forward_and_norms(tape: &mut Tape, bv: &BlockVars, x: Var, attended: Var) -> Result<Var> {
    let r1 = tape.add(x, attended)?;
    let x1 = tape.layer_norm_rows(r1, bv.ln1_gain, bv.ln1_bias)?;
    let hidden = affine(tape, x1, bv.ff1, bv.ff1_bias)?;
    let act = tape.activation(hidden, Activation::Gelu)?;
    let f = affine(tape, act, bv.ff2, bv.ff2_bias)?;
    let r2 = tape.add(x1, f)?;
    tape.layer_norm_rows(r2, bv.ln2_gain, bv.ln2_bias)
}

/// Post-norm encoder block over all rows of `x`.
fn block(tape: &mut Tape, bv: &BlockVars, heads: usize, x: Var, key_weights: Option<Var>) -> Result<Var> {
    let a = attention(tape, bv, heads, x, x, key_weights)?;
    feed_forward_and_norms(tape, bv, x, a)
}

/// One encoder block under an explicit attention regime. `retained` lists
/// the rows kept for the sparse modes and is ignored by `Dense`. The output
/// has one row per query.
pub fn attention_layer(
    tape: &mut Tape,
    bv: &BlockVars,
    heads: usize,
    x: Var,
    retained: &[usize],
    mode: AttentionMode,
) -> Result<Var> {
    match mode {
        AttentionMode::Dense => block(tape, bv, heads, x, None),
        AttentionMode::RetainedBlock => {
            let xr = tape.gather_rows(x, retained)?;
            block(tape, bv, heads, xr, None)
        }
        AttentionMode::MixedFullSparse => {
            let xr = tape.gather_rows(x, retained)?;
            let a = attention(tape, bv, heads, x, xr, None)?;
            feed_forward_and_norms(tape, bv, x, a)
        }
    }
}

fn is_gate_after(config: &EncoderConfig, layer: usize) -> Option<usize> {
    match config.retention_mode {
        RetentionMode::LayerWise => Some(layer),
        RetentionMode::OutputGating => (layer + 1 == config.num_layers).then_some(0),
    }
}

/// Gating point whose random mask is applied in front of block `layer`.
fn is_mask_before(config: &EncoderConfig, layer: usize) -> Option<usize> {
    match config.retention_mode {
        RetentionMode::LayerWise => Some(layer),
        RetentionMode::OutputGating => (layer == 0).then_some(0),
    }
}

fn pool(tape: &mut Tape, config: &EncoderConfig, x: Var, weights: Option<Var>) -> Result<Var> {
    match config.pooling {
        Pooling::MeanOverRetained => tape.weighted_mean_rows(x, weights),
        Pooling::FirstRetained => {
            let Some(w) = weights else {
                return tape.gather_rows(x, &[0]);
            };
            let first = tape.value(w).iter().position(|&v| v > 0.0);
            match first {
                Some(i) => {
                    let row = tape.gather_rows(x, &[i])?;
                    let wi = tape.gather_rows(w, &[i])?;
                    tape.mul_col(row, wi)
                }
                None => tape.constant(1, config.model_dim, vec![0.0; config.model_dim]),
            }
        }
    }
}

fn classify(tape: &mut Tape, vars: &EncoderVars, config: &EncoderConfig, x: Var, weights: Option<Var>) -> Result<Var> {
    let pooled = pool(tape, config, x, weights)?;
    tape.matmul(pooled, vars.head)
}

/// Training forward with soft gates.
///
/// At each gating point the block output is scored and gated. Gates after
/// intermediate blocks scale the hidden rows; the running product of gates
/// also weights each token as an attention key in later blocks, so a token
/// switched off early stays invisible to the others. The final gate enters
/// through the pooling weights.
pub fn forward_train(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    tokens: &[usize],
    label: usize,
    gates: GateSource<'_>,
) -> Result<TrainOutput> {
    check_tokens(config, tokens)?;
    check_label(config, label)?;
    let t = tokens.len();
    if let GateSource::Fixed(values) | GateSource::InputMasks(values) = gates {
        if values.len() != config.gating_points() || values.iter().any(|v| v.len() != t) {
            return Err(Error::contract(format!(
                "fixed gates must supply {} vectors of length {t}",
                config.gating_points()
            )));
        }
    }
    let mut x = embed(tape, vars, config, tokens)?;
    let mut cumulative: Option<Var> = None;
    let mut out_scores = Vec::new();
    let mut out_probs = Vec::new();
    let mut out_gates = Vec::new();
    if let GateSource::InputMasks(values) = gates {
        for (l, bv) in vars.blocks.iter().enumerate() {
            if let Some(g) = is_mask_before(config, l) {
                let z = tape.constant(t, 1, values[g].clone())?;
                x = tape.mul_col(x, z)?;
                cumulative = Some(match cumulative {
                    None => z,
                    Some(c) => tape.mul(c, z)?,
                });
                out_gates.push(z);
            }
            x = block(tape, bv, config.num_heads, x, cumulative)?;
        }
        let logits = classify(tape, vars, config, x, cumulative)?;
        let loss = tape.cross_entropy(logits, label)?;
        return Ok(TrainOutput {
            loss,
            logits,
            scores: out_scores,
            probs: out_probs,
            gates: out_gates,
        });
    }
    for (l, bv) in vars.blocks.iter().enumerate() {
        x = block(tape, bv, config.num_heads, x, cumulative)?;
        let Some(g) = is_gate_after(config, l) else { continue };
        let nodes = score_tokens_on_tape(tape, x, &vars.scorers[g])?;
        let z = match gates {
            GateSource::Sampled { seed, step, slot, hc } => {
                let u = NoiseKey::new(seed, step, g as u32, slot).uniforms(t)?;
                sample_hard_concrete_on_tape(tape, nodes.logits, &u, &hc)?
            }
            GateSource::Fixed(values) => tape.constant(t, 1, values[g].clone())?,
            GateSource::InputMasks(_) => unreachable!("handled above"),
        };
        cumulative = Some(match cumulative {
            None => z,
            Some(c) => tape.mul(c, z)?,
        });
        if l + 1 < config.num_layers {
            x = tape.mul_col(x, z)?;
        }
        out_scores.push(nodes.logits);
        out_probs.push(nodes.probs);
        out_gates.push(z);
    }
    let logits = classify(tape, vars, config, x, cumulative)?;
    let loss = tape.cross_entropy(logits, label)?;
    Ok(TrainOutput {
        loss,
        logits,
        scores: out_scores,
        probs: out_probs,
        gates: out_gates,
    })
}

/// The same encoder with every gate removed.
pub fn forward_ungated(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    tokens: &[usize],
    label: Option<usize>,
) -> Result<(Var, Option<Var>)> {
    check_tokens(config, tokens)?;
    if let Some(y) = label {
        check_label(config, y)?;
    }
    let mut x = embed(tape, vars, config, tokens)?;
    for bv in &vars.blocks {
        x = block(tape, bv, config.num_heads, x, None)?;
    }
    let logits = classify(tape, vars, config, x, None)?;
    let loss = label.map(|y| tape.cross_entropy(logits, y)).transpose()?;
    Ok((logits, loss))
}

fn random_subset(key: NoiseKey, n: usize, m: usize) -> Result<Vec<usize>> {
    let u = key.uniforms(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
    let mut keep = order[..m].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

/// Nested random hard masks following the retention schedule: gate `g`
/// keeps a random subset of the tokens kept by gate `g - 1`.
pub fn random_nested_masks(config: &EncoderConfig, t: usize, seed: u64, step: u64, slot: u32) -> Result<Vec<Vec<f64>>> {
    let schedule = retention_schedule(t, config)?;
    let mut active: Vec<usize> = (0..t).collect();
    let mut masks = Vec::with_capacity(schedule.len());
    for (g, &m) in schedule.iter().enumerate() {
        let keep = random_subset(
            NoiseKey::new(seed, step, g as u32, slot),
            active.len(),
            m.min(active.len()),
        )?;
        active = keep.into_iter().map(|i| active[i]).collect();
        let mut mask = vec![0.0; t];
        for &i in &active {
            mask[i] = 1.0;
        }
        masks.push(mask);
    }
    Ok(masks)
}

/// Inference with physical pruning: after each gating point only the
/// selected rows continue, in their original order.
pub fn forward_infer(
    tape: &mut Tape,
    vars: &EncoderVars,
    config: &EncoderConfig,
    tokens: &[usize],
    selector: Selector,
) -> Result<InferenceOutput> {
    check_tokens(config, tokens)?;
    let t = tokens.len();
    let schedule = retention_schedule(t, config)?;
    let mut x = embed(tape, vars, config, tokens)?;
    let mut active: Vec<usize> = (0..t).collect();
    let mut trace = Vec::with_capacity(schedule.len());
    for (l, bv) in vars.blocks.iter().enumerate() {
        if let Selector::Random { seed, slot } = selector {
            if let Some(g) = is_mask_before(config, l) {
                let m = schedule[g].min(active.len());
                let keep = random_subset(NoiseKey::new(seed, 0, g as u32, slot), active.len(), m)?;
                x = prune(tape, x, &mut active, &mut trace, keep, t)?;
            }
            x = block(tape, bv, config.num_heads, x, None)?;
            continue;
        }
        x = block(tape, bv, config.num_heads, x, None)?;
        let Some(g) = is_gate_after(config, l) else { continue };
        let m = schedule[g].min(active.len());
        if m == 0 {
            return Err(Error::contract(format!("gate {g} would keep no tokens")));
        }
        let nodes = score_tokens_on_tape(tape, x, &vars.scorers[g])?;
        let keep = select_top_m(tape.value(nodes.probs), m)?.indices;
        x = prune(tape, x, &mut active, &mut trace, keep, t)?;
    }
    let logits_var = classify(tape, vars, config, x, None)?;
    let logits = tape.value(logits_var).to_vec();
    Ok(InferenceOutput {
        prediction: argmax(&logits),
        logits,
        trace,
    })
}

fn prune(
    tape: &mut Tape,
    x: Var,
    active: &mut Vec<usize>,
    trace: &mut Vec<LayerTrace>,
    keep: Vec<usize>,
    t: usize,
) -> Result<Var> {
    let identity = keep.iter().enumerate().all(|(i, &k)| i == k) && keep.len() == tape.dims(x).0;
    let x = if identity { x } else { tape.gather_rows(x, &keep)? };
    *active = keep.into_iter().map(|i| active[i]).collect();
    trace.push(LayerTrace {
        retained: active.len(),
        fraction: active.len() as f64 / t as f64,
        active_indices: active.clone(),
    });
    Ok(x)
}

/// Index of the largest value, earliest on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
