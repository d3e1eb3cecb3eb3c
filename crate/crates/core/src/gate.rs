//! Retention scoring, Hard-Concrete gate sampling and top-M selection.
//!
//! The scorer reads each hidden state together with an exponentially decayed
//! summary of the tokens before it:
//!
//! ```text
//! m_t = decay·m_{t-1} + (1 - decay)·h_t,   m_0 = 0
//! s_t = vᵀ tanh(W h_t + U m_{t-1}) + b
//! p_t = σ(s_t)
//! ```
//!
//! Training replaces the Bernoulli gate with a stretched, clamped logistic
//! relaxation that is differentiable in `s` for fixed noise. Inference keeps
//! exactly `M` tokens, the `M` largest `p_t`, earlier positions winning ties.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Lower clip applied to uniforms before the log-odds transform.
pub const UNIFORM_CLIP: f64 = 1e-12;

/// Learned parameters of one retention scorer.
///
/// `w` and `u` act on row vectors: the pre-activation for token `t` is
/// `h_t · w + m_{t-1} · u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub w: Tensor,
    pub u: Tensor,
    pub v: Tensor,
    pub b: Tensor,
    pub decay: f64,
}

/// Scorer parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    pub w: Var,
    pub u: Var,
    pub v: Var,
    pub b: Var,
    pub decay: f64,
}

impl ScorerParams {
    pub fn init<R: Rng>(dim: usize, decay: f64, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut draw = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![r, c], data).map(Tensor::with_grad)
        };
        let params = Self {
            w: draw(dim, dim)?,
            u: draw(dim, dim)?,
            v: draw(dim, 1)?,
            b: Tensor::scalar(0.0)?.with_grad(),
            decay,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::config(format!("summary decay {} outside [0, 1]", self.decay)));
        }
        let d = self.w.shape().first().copied().unwrap_or(0);
        let expect = [
            ("w", &self.w, vec![d, d]),
            ("u", &self.u, vec![d, d]),
            ("v", &self.v, vec![d, 1]),
            ("b", &self.b, vec![1, 1]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: name,
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<ScorerVars> {
        Ok(ScorerVars {
            w: tape.leaf(&self.w)?,
            u: tape.leaf(&self.u)?,
            v: tape.leaf(&self.v)?,
            b: tape.leaf(&self.b)?,
            decay: self.decay,
        })
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w, &self.u, &self.v, &self.b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w, &mut self.u, &mut self.v, &mut self.b]
    }
}

/// Tape nodes for the logits and probabilities of one scoring pass (both T×1).
#[derive(Clone, Copy, Debug)]
pub struct ScoreNodes {
    pub logits: Var,
    pub probs: Var,
}

/// Plain values of a scoring pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionScores {
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    /// Summary states `m_1 .. m_T`, row-major T×d.
    pub m: Vec<f64>,
    pub dim: usize,
}

/// Records the scorer on `tape` for hidden states `h` (T×d).
pub fn score_tokens_on_tape(tape: &mut Tape, h: Var, params: &ScorerVars) -> Result<ScoreNodes> {
    let (t, d) = tape.dims(h);
    if t == 0 {
        return Err(Error::contract("score_tokens: empty sequence"));
    }
    let (wd, _) = tape.dims(params.w);
    if wd != d {
        return Err(Error::Shape {
            op: "score_tokens",
            lhs: vec![t, d],
            rhs: vec![wd, wd],
        });
    }
    let prev = tape.ema_shift(h, params.decay)?;
    let local = tape.matmul(h, params.w)?;
    let global = tape.matmul(prev, params.u)?;
    let pre = tape.add(local, global)?;
    let act = tape.tanh(pre)?;
    let proj = tape.matmul(act, params.v)?;
    let logits = tape.add_row(proj, params.b)?;
    let probs = tape.sigmoid(logits)?;
    Ok(ScoreNodes { logits, probs })
}

/// Evaluates the scorer on `h` (T×d) and returns logits, probabilities and
/// summary states.
pub fn score_tokens(h: &Tensor, params: &ScorerParams) -> Result<RetentionScores> {
    params.validate()?;
    let mut tape = Tape::new();
    let hv = tape.leaf(h)?;
    let vars = params.bind(&mut tape)?;
    let nodes = score_tokens_on_tape(&mut tape, hv, &vars)?;
    let (t, d) = tape.dims(hv);
    let hd = tape.value(hv);
    let mut m = vec![0.0; t * d];
    let mut state = vec![0.0; d];
    for row in 0..t {
        for j in 0..d {
            state[j] = params.decay * state[j] + (1.0 - params.decay) * hd[row * d + j];
        }
        m[row * d..(row + 1) * d].copy_from_slice(&state);
    }
    Ok(RetentionScores {
        s: tape.value(nodes.logits).to_vec(),
        p: tape.value(nodes.probs).to_vec(),
        m,
        dim: d,
    })
}

/// Temperature and stretch interval of the Hard-Concrete relaxation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcreteParams {
    pub beta: f64,
    pub stretch_low: f64,
    pub stretch_high: f64,
}

impl Default for HardConcreteParams {
    fn default() -> Self {
        Self {
            beta: 0.66,
            stretch_low: -0.1,
            stretch_high: 1.1,
        }
    }
}

impl HardConcreteParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.beta
            )));
        }
        if !(self.stretch_low < 0.0 && self.stretch_high > 1.0) {
            return Err(Error::config(format!(
                "stretch interval must satisfy low < 0 < 1 < high, got ({}, {})",
                self.stretch_low, self.stretch_high
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    Relaxed,
    Hard,
}

/// Per-token gates: relaxed values in [0, 1] or hard values in {0, 1}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub values: Vec<f64>,
    pub mode: GateMode,
}

impl GateVector {
    pub fn retained(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i)
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1.0).count()
    }
}

/// Logistic noise `log u - log(1 - u)` for each uniform. Exact endpoints are
/// rejected; interior values are clipped to `[1e-12, 1 - 1e-12]`.
pub fn logistic_noise(u: &[f64]) -> Result<Vec<f64>> {
    u.iter()
        .map(|&x| {
            if !(x > 0.0 && x < 1.0) {
                return Err(Error::Domain(format!(
                    "uniform draw {x} must lie strictly inside (0, 1)"
                )));
            }
            let c = x.clamp(UNIFORM_CLIP, 1.0 - UNIFORM_CLIP);
            Ok(c.ln() - (1.0 - c).ln())
        })
        .collect()
}

/// Records relaxed gates for logits `s` (any shape with one entry per token)
/// and fixed uniforms `u`. Gradients flow to `s` only.
pub fn sample_hard_concrete_on_tape(tape: &mut Tape, s: Var, u: &[f64], hc: &HardConcreteParams) -> Result<Var> {
    hc.validate()?;
    let (r, c) = tape.dims(s);
    if r * c != u.len() {
        return Err(Error::Shape {
            op: "sample_hard_concrete",
            lhs: vec![r, c],
            rhs: vec![u.len()],
        });
    }
    let noise = tape.constant(r, c, logistic_noise(u)?)?;
    let shifted = tape.add(s, noise)?;
    let tempered = tape.scale(shifted, 1.0 / hc.beta)?;
    let squashed = tape.sigmoid(tempered)?;
    let stretched = tape.scale(squashed, hc.stretch_high - hc.stretch_low)?;
    let moved = tape.offset(stretched, hc.stretch_low)?;
    tape.clamp_unit(moved)
}

/// Relaxed gates as plain values.
pub fn sample_hard_concrete(s: &[f64], u: &[f64], hc: &HardConcreteParams) -> Result<GateVector> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.len(), 1, s.to_vec())?;
    let z = sample_hard_concrete_on_tape(&mut tape, sv, u, hc)?;
    Ok(GateVector {
        values: tape.value(z).to_vec(),
        mode: GateMode::Relaxed,
    })
}

/// Result of deterministic top-M selection.
#[derive(Clone, Debug, PartialEq)]
pub struct TopM {
    pub gates: GateVector,
    /// Retained positions in increasing order.
    pub indices: Vec<usize>,
    /// The M-th largest probability; `+inf` when M = 0.
    pub threshold: f64,
}

/// Keeps exactly `m` tokens: the `m` largest probabilities, ties resolved in
/// favour of the earlier position.
pub fn select_top_m(p: &[f64], m: usize) -> Result<TopM> {
    if m > p.len() {
        return Err(Error::contract(format!(
            "budget {m} exceeds sequence length {}",
            p.len()
        )));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "select_top_m" });
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut indices = order[..m].to_vec();
    let threshold = indices.last().map_or(f64::INFINITY, |&i| p[i]);
    indices.sort_unstable();
    let mut values = vec![0.0; p.len()];
    for &i in &indices {
        values[i] = 1.0;
    }
    Ok(TopM {
        gates: GateVector {
            values,
            mode: GateMode::Hard,
        },
        indices,
        threshold,
    })
}

/// Expected number of retained tokens, `Σ p_t`, as a differentiable node.
pub fn expected_retention_on_tape(tape: &mut Tape, p: Var) -> Result<Var> {
    tape.sum(p)
}

pub fn expected_retention(p: &[f64]) -> f64 {
    p.iter().fold(0.0, |a, b| a + b)
}

/// Probability that the relaxed gate is nonzero for logit `s`:
/// `σ(s - β·log(-low/high))`. Diagnostic only; the budget uses `σ(s)`.
pub fn active_probability(s: f64, hc: &HardConcreteParams) -> f64 {
    let shift = hc.beta * (-hc.stretch_low / hc.stretch_high).ln();
    crate::tensor::sigmoid(s - shift)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn hc() -> HardConcreteParams {
        HardConcreteParams::default()
    }

    /// Scalar reference for one relaxed gate.
    fn gate_oracle(s: f64, u: f64, hc: &HardConcreteParams) -> f64 {
        let x = (s + u.ln() - (1.0 - u).ln()) / hc.beta;
        let sig = 1.0 / (1.0 + (-x).exp());
        (sig * (hc.stretch_high - hc.stretch_low) + hc.stretch_low).clamp(0.0, 1.0)
    }

    fn random_h(seed: u64, t: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn decay_zero_uses_previous_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ScorerParams::init(3, 0.0, &mut rng).unwrap();
        let h = random_h(2, 4, 3);
        let scores = score_tokens(&h, &params).unwrap();
        assert_eq!(&scores.m[..], h.data());
        // s_1 sees m_0 = 0, so it only depends on h_1
        let pre: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|i| h.at(0, i) * params.w.at(i, j)).sum::<f64>())
            .collect();
        let s0: f64 = pre
            .iter()
            .enumerate()
            .map(|(j, x)| x.tanh() * params.v.at(j, 0))
            .sum::<f64>();
        assert!((scores.s[0] - s0).abs() < 1e-12);
    }

    #[test]
    fn decay_one_keeps_zero_summary() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ScorerParams::init(3, 1.0, &mut rng).unwrap();
        let scores = score_tokens(&random_h(3, 5, 3), &params).unwrap();
        assert!(scores.m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decay_half_geometric_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ScorerParams::init(2, 0.5, &mut rng).unwrap();
        let h = Tensor::from_rows(&[&[4.0, -2.0], &[4.0, -2.0], &[4.0, -2.0]]).unwrap();
        let scores = score_tokens(&h, &params).unwrap();
        assert_eq!(&scores.m[0..2], &[2.0, -1.0]);
        assert_eq!(&scores.m[2..4], &[3.0, -1.5]);
        assert!(scores
            .p
            .iter()
            .zip(&scores.s)
            .all(|(p, s)| (p - 1.0 / (1.0 + (-s).exp())).abs() < 1e-15));
    }

    #[test]
    fn score_tokens_dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ScorerParams::init(3, 0.9, &mut rng).unwrap();
        assert!(matches!(
            score_tokens(&random_h(1, 4, 5), &params),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn hard_concrete_examples() {
        let z = sample_hard_concrete(&[0.0, 20.0, 0.0], &[0.5, 0.5, 0.01], &hc()).unwrap();
        assert!((z.values[0] - 0.5).abs() < 1e-15);
        assert_eq!(z.values[1], 1.0);
        assert_eq!(z.values[2], 0.0);
        // pre-clamp value of the third gate
        let x = (0.01f64.ln() - 0.99f64.ln()) / 0.66;
        let pre = 1.2 / (1.0 + (-x).exp()) - 0.1;
        assert!((pre - (-0.0989)).abs() < 5e-5, "{pre}");
    }

    #[test]
    fn hard_concrete_rejects_endpoints() {
        assert!(matches!(
            sample_hard_concrete(&[0.0], &[0.0], &hc()),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            sample_hard_concrete(&[0.0], &[1.0], &hc()),
            Err(Error::Domain(_))
        ));
        // interior values beyond the clip are clipped, not rejected
        let z = sample_hard_concrete(&[0.0], &[1e-300], &hc()).unwrap();
        assert_eq!(z.values[0], 0.0);
    }

    #[test]
    fn hard_concrete_params_validation() {
        assert!(HardConcreteParams { beta: 0.0, ..hc() }.validate().is_err());
        assert!(HardConcreteParams {
            stretch_low: 0.1,
            ..hc()
        }
        .validate()
        .is_err());
        assert!(HardConcreteParams {
            stretch_high: 0.9,
            ..hc()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn stretched_sigmoid_grid_at_half() {
        let grid: Vec<f64> = (0..100).map(|i| -10.0 + 20.0 * i as f64 / 99.0).collect();
        let z = sample_hard_concrete(&grid, &vec![0.5; 100], &hc()).unwrap();
        for (s, got) in grid.iter().zip(&z.values) {
            assert!((got - gate_oracle(*s, 0.5, &hc())).abs() < 1e-14);
        }
    }

    #[test]
    fn top_m_examples() {
        let r = select_top_m(&[0.9, 0.1, 0.5], 2).unwrap();
        assert_eq!(r.indices, vec![0, 2]);
        assert_eq!(r.threshold, 0.5);
        let all = select_top_m(&[0.3, 0.2, 0.7], 3).unwrap();
        assert_eq!(all.gates.values, vec![1.0; 3]);
        let tie = select_top_m(&[0.5, 0.5, 0.5], 2).unwrap();
        assert_eq!(tie.indices, vec![0, 1]);
        assert!(select_top_m(&[0.1], 2).is_err());
        let none = select_top_m(&[0.1, 0.2], 0).unwrap();
        assert!(none.indices.is_empty() && none.threshold.is_infinite());
    }

    #[test]
    fn expected_retention_examples() {
        assert_eq!(expected_retention(&[0.5, 0.25]), 0.75);
        assert_eq!(expected_retention(&vec![crate::tensor::sigmoid(0.0); 10]), 5.0);
        let near = vec![1.0 - 1e-12; 7];
        assert!((expected_retention(&near) - 7.0).abs() < 1e-10);
        let mut tape = Tape::new();
        let p = tape.constant(2, 1, vec![0.5, 0.25]).unwrap();
        let s = expected_retention_on_tape(&mut tape, p).unwrap();
        assert_eq!(tape.scalar(s), 0.75);
    }

    #[test]
    fn active_probability_matches_monte_carlo() {
        let p = active_probability(0.0, &hc());
        assert!((p - 0.8296).abs() < 1e-4, "{p}");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let hits = (0..n)
            .filter(|_| gate_oracle(0.0, rng.gen_range(1e-12..1.0), &hc()) > 0.0)
            .count();
        let freq = hits as f64 / n as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "freq {freq} vs {p}");
    }

    #[test]
    fn active_probability_limits() {
        assert!(active_probability(-800.0, &hc()) < 1e-300);
        let cold = HardConcreteParams { beta: 1e-12, ..hc() };
        assert!((active_probability(0.0, &cold) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn scorer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ScorerParams::init(4, 0.9, &mut rng).unwrap();
        let h = random_h(5, 6, 4);
        let p2 = params.clone();
        let err = grad_check(
            move |t, hv| {
                let vars = p2.bind(t)?;
                let nodes = score_tokens_on_tape(t, hv, &vars)?;
                let w = t.constant(6, 1, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7])?;
                let prod = t.mul(nodes.probs, w)?;
                t.sum(prod)
            },
            &h,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn relaxed_gates_in_unit_interval(s in proptest::collection::vec(-30.0f64..30.0, 1..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = s.iter().map(|_| rng.gen_range(1e-9..1.0 - 1e-9)).collect();
            let z = sample_hard_concrete(&s, &u, &hc()).unwrap();
            prop_assert!(z.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn relaxed_gate_monotone_in_logit(a in -20.0f64..20.0, b in -20.0f64..20.0, u in 1e-6f64..(1.0 - 1e-6)) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let z = sample_hard_concrete(&[lo, hi], &[u, u], &hc()).unwrap();
            prop_assert!(z.values[0] <= z.values[1]);
        }

        #[test]
        fn top_m_exact_count_and_argtop_invariance(p in proptest::collection::vec(0.0f64..1.0, 1..40), frac in 0.0f64..=1.0) {
            let m = (frac * p.len() as f64).floor() as usize;
            let base = select_top_m(&p, m).unwrap();
            prop_assert_eq!(base.gates.count_ones(), m);
            let doubled: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            let squashed: Vec<f64> = p.iter().map(|&x| crate::tensor::sigmoid(x)).collect();
            prop_assert_eq!(&select_top_m(&doubled, m).unwrap().indices, &base.indices);
            prop_assert_eq!(&select_top_m(&squashed, m).unwrap().indices, &base.indices);
        }

        #[test]
        fn mean_gate_gradient_matches_finite_differences(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..0.99)).collect();
            // skip draws where a coordinate sits within a step of a clamp kink
            let near_kink = s.iter().zip(&u).any(|(&si, &ui)| {
                let pre = |x: f64| -> f64 {
                    let v = (x + ui.ln() - (1.0f64 - ui).ln()) / 0.66;
                    1.2 / (1.0 + (-v).exp()) - 0.1
                };
                [pre(si - 1e-4), pre(si + 1e-4)].iter().any(|&q| (q - 0.0).abs() < 1e-3 || (q - 1.0).abs() < 1e-3)
                    || (pre(si - 1e-4) < 0.0) != (pre(si + 1e-4) < 0.0)
                    || (pre(si - 1e-4) > 1.0) != (pre(si + 1e-4) > 1.0)
            });
            prop_assume!(!near_kink);
            let x = Tensor::column_vector(&s).unwrap();
            let err = grad_check(
                move |t, sv| {
                    let z = sample_hard_concrete_on_tape(t, sv, &u, &HardConcreteParams::default())?;
                    let total = t.sum(z)?;
                    t.scale(total, 1.0 / 6.0)
                },
                &x,
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4, "{}", err);
        }
    }
}
