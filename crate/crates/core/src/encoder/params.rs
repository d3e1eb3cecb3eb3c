use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::gate::{ScorerParams, ScorerVars};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ff1: Tensor,
    pub ff1_bias: Tensor,
    pub ff2: Tensor,
    pub ff2_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

const BLOCK_FIELDS: [&str; 16] = [
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias", "ff1", "ff1_bias", "ff2", "ff2_bias",
    "ln2_gain", "ln2_bias",
];

const SCORER_FIELDS: [&str; 4] = ["w", "u", "v", "b"];

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ff1: Var,
    pub ff1_bias: Var,
    pub ff2: Var,
    pub ff2_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

impl BlockParams {
    fn init<R: Rng>(d: usize, ff: usize, rng: &mut R) -> Self {
        let zeros = |n: usize| Tensor::zeros(vec![1, n]).with_grad();
        let ones = |n: usize| Tensor::new(vec![1, n], vec![1.0; n]).expect("finite").with_grad();
        Self {
            wq: glorot(d, d, rng),
            bq: zeros(d),
            wk: glorot(d, d, rng),
            bk: zeros(d),
            wv: glorot(d, d, rng),
            bv: zeros(d),
            wo: glorot(d, d, rng),
            bo: zeros(d),
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            ff1: glorot(d, ff, rng),
            ff1_bias: zeros(ff),
            ff2: glorot(ff, d, rng),
            ff2_bias: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ff1,
            &self.ff1_bias,
            &self.ff2,
            &self.ff2_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ff1,
            &mut self.ff1_bias,
            &mut self.ff2,
            &mut self.ff2_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn bind(&self, tape: &mut Tape) -> Result<BlockVars> {
        let v = self.tensors().map(|t| tape.leaf(t));
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_gain, ln1_bias, ff1, ff1_bias, ff2, ff2_bias, ln2_gain, ln2_bias] = v;
        Ok(BlockVars {
            wq: wq?,
            bq: bq?,
            wk: wk?,
            bk: bk?,
            wv: wv?,
            bv: bv?,
            wo: wo?,
            bo: bo?,
            ln1_gain: ln1_gain?,
            ln1_bias: ln1_bias?,
            ff1: ff1?,
            ff1_bias: ff1_bias?,
            ff2: ff2?,
            ff2_bias: ff2_bias?,
            ln2_gain: ln2_gain?,
            ln2_bias: ln2_bias?,
        })
    }
}

impl BlockVars {
    fn vars(&self) -> [Var; 16] {
        [
            self.wq,
            self.bq,
            self.wk,
            self.bk,
            self.wv,
            self.bv,
            self.wo,
            self.bo,
            self.ln1_gain,
            self.ln1_bias,
            self.ff1,
            self.ff1_bias,
            self.ff2,
            self.ff2_bias,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    normal_tensor(rows, cols, std, rng)
}

fn normal_tensor<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite").with_grad()
}

/// All learned tensors of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub scorers: Vec<ScorerParams>,
    /// Bias-free projection from pooled features to class logits.
    pub head: Tensor,
}

/// Parameters recorded on a tape, in the same layout as [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub scorers: Vec<ScorerVars>,
    pub head: Var,
}

impl EncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let embedding = normal_tensor(config.vocab_size, d, 1.0, rng);
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams::init(d, config.ff_dim, rng))
            .collect();
        let scorers = (0..config.gating_points())
            .map(|_| ScorerParams::init(d, config.decay_gamma, rng))
            .collect::<Result<_>>()?;
        let head = glorot(d, config.num_classes, rng);
        Ok(Self {
            embedding,
            blocks,
            scorers,
            head,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<EncoderVars> {
        Ok(EncoderVars {
            embedding: tape.leaf(&self.embedding)?,
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect::<Result<_>>()?,
            scorers: self.scorers.iter().map(|s| s.bind(tape)).collect::<Result<_>>()?,
            head: tape.leaf(&self.head)?,
        })
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_owned(), &self.embedding)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        for (g, s) in self.scorers.iter().enumerate() {
            for (name, t) in SCORER_FIELDS.iter().zip(s.tensors()) {
                out.push((format!("scorers.{g}.{name}"), t));
            }
        }
        out.push(("head".to_owned(), &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        for s in &mut self.scorers {
            out.extend(s.tensors_mut());
        }
        out.push(&mut self.head);
        out
    }

    /// Replaces tensors by name; every name must be present with its shape.
    pub fn load_named(&mut self, mut values: std::collections::HashMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = self.named().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(self.tensors_mut()) {
            let t = values
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        if let Some(extra) = values.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Adds tape gradients for `vars` into the matching grad buffers.
    pub fn accumulate(&mut self, vars: &EncoderVars, grads: &Gradients) -> Result<()> {
        for (v, t) in vars.all().into_iter().zip(self.tensors_mut()) {
            grads.accumulate_into(v, t)?;
        }
        Ok(())
    }
}

impl EncoderVars {
    /// Vars in the order of [`EncoderParams::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        for s in &self.scorers {
            out.extend([s.w, s.u, s.v, s.b]);
        }
        out.push(self.head);
        out
    }
}
