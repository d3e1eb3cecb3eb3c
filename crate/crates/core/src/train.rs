//! Alternating primal/dual training and inference-mode evaluation.
//!
//! Each step takes one optimizer step on every parameter, scorer included,
//! against the batch Lagrangian with the multiplier frozen, then one
//! projected ascent step on the multiplier using the same batch's expected
//! retention.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{ascend_lambda, lagrangian_loss, LagrangeState};
use crate::config::{DataConfig, RunConfig, Strategy};
use crate::encoder::{
    forward_infer, forward_train, forward_ungated, random_nested_masks, retention_schedule, EncoderConfig,
    EncoderParams, GateSource, Selector,
};
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;
use crate::optim::Optimizer;
use crate::rng::derive_seed;
use crate::tasks::{generate_needle_dataset, read_jsonl, recall_of_indices, LabeledExample};
use crate::tensor::Tape;

/// Seed offset separating the eval split from the train split.
const EVAL_SPLIT: u64 = 1;
const TRAIN_SPLIT: u64 = 0;

/// Loads or generates the train and eval splits named by the config.
pub fn load_data(config: &RunConfig) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let (train, eval) = match &config.data {
        DataConfig::Needle {
            task,
            train_examples,
            eval_examples,
        } => (
            generate_needle_dataset(task, *train_examples, derive_seed(config.seed, TRAIN_SPLIT))?,
            generate_needle_dataset(task, *eval_examples, derive_seed(config.seed, EVAL_SPLIT))?,
        ),
        DataConfig::Files { train, eval } => {
            let open = |p: &str| -> Result<Vec<LabeledExample>> {
                let f = std::fs::File::open(p).map_err(|e| Error::Data(format!("cannot open {p}: {e}")))?;
                read_jsonl(std::io::BufReader::new(f))
            };
            (open(train)?, open(eval)?)
        }
    };
    for ex in train.iter().chain(&eval) {
        check_example(&config.encoder, ex)?;
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Data("train and eval splits must be non-empty".into()));
    }
    Ok((train, eval))
}

fn check_example(config: &EncoderConfig, ex: &LabeledExample) -> Result<()> {
    if ex.tokens.is_empty() || ex.tokens.len() > config.max_seq_len {
        return Err(Error::Data(format!(
            "example length {} outside 1..={}",
            ex.tokens.len(),
            config.max_seq_len
        )));
    }
    if ex.label >= config.num_classes {
        return Err(Error::Data(format!(
            "label {} out of range for {} classes",
            ex.label, config.num_classes
        )));
    }
    if let Some(t) = ex.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Data(format!(
            "token id {t} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

/// Batch averages from one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    pub task_loss: f64,
    pub lagrangian: f64,
    /// Multiplier after the ascent step.
    pub lambda: f64,
    pub expected_retention: f64,
    pub budget: f64,
    pub budget_violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rho: f64,
    pub accuracy: f64,
    pub retention_recall: f64,
    /// Mean retained fraction at each gating point.
    pub layer_fractions: Vec<f64>,
    pub examples: usize,
}

pub struct Trainer {
    pub config: RunConfig,
    pub params: EncoderParams,
    pub lagrange: LagrangeState,
    optimizer: Optimizer,
    step: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
        let params = EncoderParams::init(&config.encoder, &mut rng)?;
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer.clone())?,
            lagrange: config.budget.initial_state(),
            params,
            config,
            step: 0,
            started: Instant::now(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Expected tokens the training constraint allows per sequence of
    /// length `t`, compared against the per-gate mean of `Σp`.
    fn budget_for(&self, t: usize) -> Result<f64> {
        let m = self.config.budget.budget.resolve(t)?;
        Ok(m)
    }

    /// One primal step on the batch followed by one ascent step on λ.
    /// Parameters are left unchanged when the step fails.
    pub fn train_step(&mut self, batch: &[LabeledExample]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let step = self.step;
        let lambda = self.lagrange.lambda();
        let cfg = &self.config;
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape)?;
        let n = batch.len() as f64;
        let mut task_terms = Vec::with_capacity(batch.len());
        let mut retention_terms = Vec::new();
        let mut budget = 0.0;
        let mut masked_count = 0.0;
        for (slot, ex) in batch.iter().enumerate() {
            let masks;
            let source = match cfg.strategy {
                Strategy::Adaptive => GateSource::Sampled {
                    seed: cfg.seed,
                    step,
                    slot: slot as u32,
                    hc: cfg.hard_concrete,
                },
                Strategy::Random => {
                    masks = random_nested_masks(&cfg.encoder, ex.tokens.len(), cfg.seed, step, slot as u32)?;
                    let kept: f64 = masks.iter().flatten().sum();
                    masked_count += kept / (masks.len() as f64 * n);
                    GateSource::InputMasks(&masks)
                }
            };
            let out = forward_train(&mut tape, &vars, &cfg.encoder, &ex.tokens, ex.label, source)?;
            task_terms.push(out.loss);
            let gates = out.probs.len() as f64;
            for p in out.probs {
                let s = tape.sum(p)?;
                retention_terms.push(tape.scale(s, 1.0 / (gates * n))?);
            }
            budget += self.budget_for(ex.tokens.len())? / n;
        }
        let task = sum_vars(&mut tape, &task_terms)?;
        let task = tape.scale(task, 1.0 / n)?;
        let (loss, expected) = match cfg.strategy {
            Strategy::Adaptive => {
                let retention = sum_vars(&mut tape, &retention_terms)?;
                let expected = tape.scalar(retention);
                (lagrangian_loss(&mut tape, task, retention, lambda, budget)?, expected)
            }
            Strategy::Random => (task, masked_count),
        };
        let task_loss = tape.scalar(task);
        let lagrangian = tape.scalar(loss);
        let grads = tape.backward(loss)?;
        let backup = self.params.clone();
        self.params.zero_grad();
        self.params.accumulate(&vars, &grads)?;
        if let Err(e) = self.optimizer.step(self.params.tensors_mut()) {
            self.params = backup;
            return Err(e);
        }
        if cfg.strategy == Strategy::Adaptive && step >= cfg.budget.warmup_steps {
            self.lagrange = ascend_lambda(
                std::mem::take(&mut self.lagrange),
                step,
                expected,
                budget,
                cfg.budget.eta,
            )?;
        }
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            task_loss,
            lagrangian,
            lambda: self.lagrange.lambda(),
            expected_retention: expected,
            budget,
            budget_violation: expected - budget,
        })
    }

    /// Runs every configured epoch, reporting metrics every `log_every`
    /// steps and after the final step.
    pub fn fit(
        &mut self,
        train: &[LabeledExample],
        eval: &[LabeledExample],
        mut sink: impl FnMut(&MetricsRecord, &Trainer) -> Result<()>,
    ) -> Result<()> {
        let bs = self.config.optimizer.batch_size;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut last_logged = None;
        let mut last_stats = None;
        for epoch in 0..self.config.optimizer.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, 1000 + epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(bs) {
                let batch: Vec<LabeledExample> = chunk.iter().map(|&i| train[i].clone()).collect();
                let stats = self.train_step(&batch)?;
                if stats.step % self.config.log_every == 0 {
                    let record = self.record(&stats, eval)?;
                    sink(&record, self)?;
                    last_logged = Some(stats.step);
                }
                last_stats = Some(stats);
            }
        }
        if let Some(stats) = last_stats {
            if last_logged != Some(stats.step) {
                let record = self.record(&stats, eval)?;
                sink(&record, self)?;
            }
        }
        Ok(())
    }

    fn record(&self, stats: &StepStats, eval: &[LabeledExample]) -> Result<MetricsRecord> {
        let report = self.evaluate(eval, self.config.encoder.rho)?;
        Ok(MetricsRecord {
            step: stats.step,
            task_loss: stats.task_loss,
            lagrangian: stats.lagrangian,
            lambda: stats.lambda,
            expected_retention: stats.expected_retention,
            budget_violation: stats.budget_violation,
            eval_accuracy: report.accuracy,
            retention_recall: report.retention_recall,
            wall_seconds: if self.config.record_wall_time {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        })
    }

    /// Inference-mode metrics at retention ratio `rho`.
    pub fn evaluate(&self, data: &[LabeledExample], rho: f64) -> Result<EvalReport> {
        evaluate(
            &self.params,
            &self.config.encoder,
            data,
            rho,
            eval_selector(&self.config),
        )
    }
}

/// Token selector used when evaluating a model trained under `config`.
pub fn eval_selector(config: &RunConfig) -> Selector {
    match config.strategy {
        Strategy::Adaptive => Selector::Scored,
        Strategy::Random => Selector::Random {
            seed: derive_seed(config.seed, EVAL_SPLIT),
            slot: 0,
        },
    }
}

fn sum_vars(tape: &mut Tape, vars: &[crate::tensor::Var]) -> Result<crate::tensor::Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Accuracy, recall of relevant tokens in the final retained set, and mean
/// retained fractions per gate, with top-M inference at ratio `rho`.
///
/// With [`Selector::Random`] each example draws its own subset from the
/// slot equal to its index.
pub fn evaluate(
    params: &EncoderParams,
    encoder: &EncoderConfig,
    data: &[LabeledExample],
    rho: f64,
    selector: Selector,
) -> Result<EvalReport> {
    let config = EncoderConfig { rho, ..encoder.clone() };
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut correct = 0usize;
    let mut recall = 0.0;
    let mut fractions = vec![0.0; config.gating_points()];
    for (i, ex) in data.iter().enumerate() {
        let sel = match selector {
            Selector::Random { seed, .. } => Selector::Random { seed, slot: i as u32 },
            s => s,
        };
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let out = forward_infer(&mut tape, &vars, &config, &ex.tokens, sel)?;
        if out.prediction == ex.label {
            correct += 1;
        }
        let kept = &out.trace.last().expect("at least one gate").active_indices;
        recall += recall_of_indices(kept.iter().copied(), &ex.relevance)?;
        for (f, layer) in fractions.iter_mut().zip(&out.trace) {
            *f += layer.fraction;
        }
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        rho,
        accuracy: correct as f64 / n,
        retention_recall: recall / n,
        layer_fractions: fractions.into_iter().map(|f| f / n).collect(),
        examples: data.len(),
    })
}

/// Accuracy of the encoder with every gate removed.
pub fn evaluate_ungated(params: &EncoderParams, encoder: &EncoderConfig, data: &[LabeledExample]) -> Result<f64> {
    let mut correct = 0usize;
    for ex in data {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let (logits, _) = forward_ungated(&mut tape, &vars, encoder, &ex.tokens, None)?;
        if crate::encoder::argmax(tape.value(logits)) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean retained fraction per gate for each ratio, with the embedding row
/// (always 1.0) first.
pub fn retention_table(
    params: &EncoderParams,
    encoder: &EncoderConfig,
    data: &[LabeledExample],
    budgets: &[f64],
) -> Result<Vec<(f64, Vec<f64>)>> {
    budgets
        .iter()
        .map(|&rho| {
            let r = evaluate(params, encoder, data, rho, Selector::Scored)?;
            let mut rows = vec![1.0];
            rows.extend(r.layer_fractions);
            Ok((rho, rows))
        })
        .collect()
}

/// Scheduled per-gate counts for a sequence of length `t`.
pub fn scheduled_counts(encoder: &EncoderConfig, t: usize) -> Result<Vec<usize>> {
    retention_schedule(t, encoder)
}
