//! Needle-in-filler classification data with known relevant positions.
//!
//! Each class owns a block of needle token ids. An example plants `k` needles
//! among random filler tokens: a strict majority come from the label's block
//! and the rest from other classes, so the label is the most frequent class
//! among the needles and nothing else in the sequence carries information.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateVector;

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
/// First id available to real tokens.
pub const FIRST_TOKEN_ID: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub num_needles: usize,
    pub num_classes: usize,
    pub needles_per_class: usize,
}

impl Default for NeedleConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            seq_len: 64,
            num_needles: 4,
            num_classes: 4,
            needles_per_class: 8,
        }
    }
}

impl NeedleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_needles == 0 {
            return Err(Error::config(
                "num_needles must be at least 1; the label is undefined without needles",
            ));
        }
        if self.num_needles > self.seq_len {
            return Err(Error::config(format!(
                "num_needles {} exceeds seq_len {}",
                self.num_needles, self.seq_len
            )));
        }
        if self.num_classes < 2 || self.needles_per_class == 0 {
            return Err(Error::config("need at least 2 classes and 1 needle id per class"));
        }
        if self.needle_start() <= FIRST_TOKEN_ID || self.needle_start() > self.vocab_size {
            return Err(Error::config(format!(
                "vocab_size {} leaves no filler ids after {} needle ids",
                self.vocab_size,
                self.num_classes * self.needles_per_class
            )));
        }
        Ok(())
    }

    /// Needle ids occupy the top of the vocabulary.
    pub fn needle_start(&self) -> usize {
        self.vocab_size
            .saturating_sub(self.num_classes * self.needles_per_class)
    }

    pub fn class_of(&self, token: usize) -> Option<usize> {
        let start = self.needle_start();
        (token >= start && token < self.vocab_size).then(|| (token - start) / self.needles_per_class)
    }

    /// Needles drawn from the label's class.
    pub fn majority(&self) -> usize {
        self.num_needles / 2 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    pub label: usize,
    /// 1 at informative positions, 0 elsewhere.
    pub relevance: Vec<u8>,
}

impl LabeledExample {
    pub fn relevant_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.relevance
            .iter()
            .enumerate()
            .filter(|(_, &r)| r != 0)
            .map(|(i, _)| i)
    }
}

fn needle_example<R: Rng>(config: &NeedleConfig, label: usize, rng: &mut R) -> LabeledExample {
    let start = config.needle_start();
    let mut tokens: Vec<usize> = (0..config.seq_len)
        .map(|_| rng.gen_range(FIRST_TOKEN_ID..start))
        .collect();
    let mut classes = vec![label; config.majority()];
    while classes.len() < config.num_needles {
        let other = (label + rng.gen_range(1..config.num_classes)) % config.num_classes;
        classes.push(other);
    }
    let positions = rand::seq::index::sample(rng, config.seq_len, config.num_needles);
    let mut relevance = vec![0u8; config.seq_len];
    for (pos, class) in positions.iter().zip(classes) {
        tokens[pos] = start + class * config.needles_per_class + rng.gen_range(0..config.needles_per_class);
        relevance[pos] = 1;
    }
    LabeledExample {
        tokens,
        label,
        relevance,
    }
}

/// `n` examples with labels cycling through the classes, then shuffled.
pub fn generate_needle_dataset(config: &NeedleConfig, n: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .map(|y| needle_example(config, y, &mut rng))
        .collect())
}

/// Class with the most needles in `tokens`, earliest class on ties.
pub fn needle_label(config: &NeedleConfig, tokens: &[usize]) -> Option<usize> {
    let mut counts = vec![0usize; config.num_classes];
    for &t in tokens {
        if let Some(c) = config.class_of(t) {
            counts[c] += 1;
        }
    }
    let best = counts.iter().copied().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).expect("max exists"))
}

/// Fraction of relevant positions that were kept. A mask with no relevant
/// positions counts as fully recalled.
pub fn retention_recall(gates: &GateVector, relevance: &[u8]) -> Result<f64> {
    if gates.values.len() != relevance.len() {
        return Err(Error::Shape {
            op: "retention_recall",
            lhs: vec![gates.values.len()],
            rhs: vec![relevance.len()],
        });
    }
    recall_of_indices(gates.retained(), relevance)
}

/// Recall of an explicit list of kept positions.
pub fn recall_of_indices(kept: impl IntoIterator<Item = usize>, relevance: &[u8]) -> Result<f64> {
    let relevant = relevance.iter().filter(|&&r| r != 0).count();
    let mut hit = 0;
    for i in kept {
        let r = *relevance
            .get(i)
            .ok_or_else(|| Error::contract(format!("kept position {i} outside sequence of {}", relevance.len())))?;
        if r != 0 {
            hit += 1;
        }
    }
    if relevant == 0 {
        return Ok(1.0);
    }
    Ok(hit as f64 / relevant as f64)
}

pub fn write_jsonl<W: Write>(mut out: W, data: &[LabeledExample]) -> Result<()> {
    for ex in data {
        serde_json::to_writer(&mut out, ex)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads examples in the needle schema; errors name the offending line.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if ex.relevance.len() != ex.tokens.len() {
            return Err(Error::Line {
                line: i + 1,
                msg: format!(
                    "relevance has {} entries for {} tokens",
                    ex.relevance.len(),
                    ex.tokens.len()
                ),
            });
        }
        out.push(ex);
    }
    Ok(out)
}
