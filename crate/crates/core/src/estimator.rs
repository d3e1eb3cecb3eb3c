//! Statistical checks of the relaxed-gate gradient estimator on toy losses
//! small enough to enumerate, and the alternating primal/dual scheme on a
//! convex toy whose constrained optimum is known in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{
    ascend_lambda, budget_certificates, CertificateReport, FeasibleReference, LagrangeState, StepSchedules,
};
use crate::error::{Error, Result};
use crate::gate::{sample_hard_concrete_on_tape, HardConcreteParams};
use crate::rng::{derive_seed, NoiseKey};
use crate::tensor::{sigmoid, Tape, Tensor};

/// Largest toy for which all `2^T` masks are enumerated.
pub const MAX_TOY_TOKENS: usize = 12;
/// Largest toy whose relaxed gradient is computed by quadrature.
pub const MAX_QUADRATURE_TOKENS: usize = 3;
pub const DEFAULT_QUADRATURE_POINTS: usize = 100_000;
/// Rows per tape when estimating gradients.
const CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Constant {
        value: f64,
    },
    /// `Σ c_t z_t`.
    Linear {
        c: Vec<f64>,
    },
    /// `‖A (H ⊙ z) x − y‖²` with `A` m×T, `H` T×d, rows of `H` scaled by `z`.
    Quadratic {
        a: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        x: Vec<f64>,
        y: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyProblem {
    pub loss: LossSpec,
    /// Keep probabilities; the relaxed gates use logits `ln p − ln(1 − p)`.
    pub p: Vec<f64>,
    pub hc: HardConcreteParams,
    #[serde(skip)]
    design: Vec<f64>,
    #[serde(skip)]
    rows: usize,
}

impl ToyProblem {
    pub fn new(loss: LossSpec, p: Vec<f64>, hc: HardConcreteParams) -> Result<Self> {
        hc.validate()?;
        let t = p.len();
        if t == 0 || t > MAX_TOY_TOKENS {
            return Err(Error::contract(format!(
                "toy problems need 1..={MAX_TOY_TOKENS} tokens, got {t}"
            )));
        }
        if let Some(bad) = p.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain(format!(
                "keep probability {bad} must lie strictly inside (0, 1)"
            )));
        }
        let (design, rows) = match &loss {
            LossSpec::Constant { .. } => (Vec::new(), 0),
            LossSpec::Linear { c } => {
                if c.len() != t {
                    return Err(Error::contract(format!(
                        "linear loss has {} weights for {t} tokens",
                        c.len()
                    )));
                }
                (Vec::new(), 0)
            }
            LossSpec::Quadratic { a, h, x, y } => {
                let m = a.len();
                if m == 0 || a.iter().any(|r| r.len() != t) || y.len() != m {
                    return Err(Error::contract("quadratic loss needs A of shape m×T and y of length m"));
                }
                if h.len() != t || h.iter().any(|r| r.len() != x.len()) {
                    return Err(Error::contract("quadratic loss needs H of shape T×d and x of length d"));
                }
                // A diag(Hx): the loss is ‖B z − y‖².
                let hx: Vec<f64> = h.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
                let b = a.iter().flat_map(|r| r.iter().zip(&hx).map(|(a, w)| a * w)).collect();
                (b, m)
            }
        };
        Ok(Self {
            loss,
            p,
            hc,
            design,
            rows,
        })
    }

    pub fn linear(c: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        Self::new(LossSpec::Linear { c }, p, HardConcreteParams::default())
    }

    /// Quadratic toy with standard normal `A` (3×T), `H` (T×2), `x`, `y` and
    /// probabilities uniform in [0.2, 0.8].
    pub fn random_quadratic(t: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let a = (0..3).map(|_| draw(t)).collect();
        let h = (0..t).map(|_| draw(2)).collect();
        let x = draw(2);
        let y = draw(3);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
        let p = (0..t).map(|_| rng.gen_range(0.2..0.8)).collect();
        Self::new(LossSpec::Quadratic { a, h, x, y }, p, HardConcreteParams::default())
    }

    pub fn tokens(&self) -> usize {
        self.p.len()
    }

    pub fn logits(&self) -> Vec<f64> {
        self.p.iter().map(|&p| p.ln() - (1.0 - p).ln()).collect()
    }

    /// Loss at any real-valued gate vector.
    pub fn loss_at(&self, z: &[f64]) -> f64 {
        match &self.loss {
            LossSpec::Constant { value } => *value,
            LossSpec::Linear { c } => c.iter().zip(z).map(|(c, z)| c * z).sum(),
            LossSpec::Quadratic { y, .. } => {
                let t = self.tokens();
                (0..self.rows)
                    .map(|i| {
                        let r: f64 = (0..t).map(|j| self.design[i * t + j] * z[j]).sum::<f64>() - y[i];
                        r * r
                    })
                    .sum()
            }
        }
    }

    /// Per-sample pathwise gradients w.r.t. the logits for each row of
    /// uniforms (`n × T`, row-major).
    fn pathwise_rows(&self, u: &[f64], n: usize) -> Result<Vec<f64>> {
        let t = self.tokens();
        let s = self.logits();
        let mut tape = Tape::new();
        let tiled = Tensor::new(vec![n, t], s.iter().copied().cycle().take(n * t).collect())?.with_grad();
        let sv = tape.leaf(&tiled)?;
        let z = sample_hard_concrete_on_tape(&mut tape, sv, u, &self.hc)?;
        let per_row = match &self.loss {
            LossSpec::Constant { .. } => tape.scale(z, 0.0)?,
            LossSpec::Linear { c } => {
                let cv = tape.constant(t, 1, c.clone())?;
                tape.matmul(z, cv)?
            }
            LossSpec::Quadratic { y, .. } => {
                let m = self.rows;
                let bt = (0..t)
                    .flat_map(|j| (0..m).map(move |i| (i, j)))
                    .map(|(i, j)| self.design[i * t + j]);
                let btv = tape.constant(t, m, bt.collect())?;
                let fitted = tape.matmul(z, btv)?;
                let neg_y = tape.constant(1, m, y.iter().map(|v| -v).collect())?;
                let r = tape.add_row(fitted, neg_y)?;
                tape.mul(r, r)?
            }
        };
        let total = tape.sum(per_row)?;
        let grads = tape.backward(total)?;
        Ok(grads.get(sv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n * t]))
    }

    /// Pathwise gradient of one relaxed sample drawn with uniforms `u`.
    pub fn pathwise_gradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.pathwise_rows(u, 1)
    }
}

/// Exact Bernoulli expectation and its gradient w.r.t. `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    pub expectation: f64,
    pub gradient: Vec<f64>,
}

/// Enumerates all `2^T` hard masks weighted by `Π p^z (1 − p)^(1−z)`.
pub fn brute_force_expected_loss(problem: &ToyProblem) -> Result<BruteForce> {
    brute_force_at(problem, &problem.p)
}

fn brute_force_at(problem: &ToyProblem, p: &[f64]) -> Result<BruteForce> {
    let t = p.len();
    if t > MAX_TOY_TOKENS {
        return Err(Error::contract(format!(
            "enumeration refused for {t} > {MAX_TOY_TOKENS} tokens"
        )));
    }
    let mut expectation = 0.0;
    let mut gradient = vec![0.0; t];
    let mut z = vec![0.0; t];
    for mask in 0u32..1 << t {
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = f64::from(mask >> j & 1);
        }
        let factor = |j: usize| if z[j] == 1.0 { p[j] } else { 1.0 - p[j] };
        let loss = problem.loss_at(&z);
        expectation += (0..t).map(factor).product::<f64>() * loss;
        for (i, g) in gradient.iter_mut().enumerate() {
            let rest: f64 = (0..t).filter(|&j| j != i).map(factor).product();
            let sign = if z[i] == 1.0 { 1.0 } else { -1.0 };
            *g += sign * rest * loss;
        }
    }
    Ok(BruteForce { expectation, gradient })
}

/// Sample mean and per-coordinate variance of single-sample gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McGradient {
    pub samples: usize,
    pub mean: Vec<f64>,
    /// Unbiased variance of one sample's gradient, per coordinate.
    pub variance: Vec<f64>,
}

impl McGradient {
    pub fn std_errors(&self) -> Vec<f64> {
        self.variance.iter().map(|v| (v / self.samples as f64).sqrt()).collect()
    }
}

struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    fn finish(self) -> McGradient {
        let denom = (self.n.max(2) - 1) as f64;
        McGradient {
            samples: self.n,
            mean: self.mean,
            variance: self.m2.into_iter().map(|s| s / denom).collect(),
        }
    }
}

/// Averages `b` pathwise gradients w.r.t. the logits. Chunk `c` of rows
/// draws from noise stream `(seed, c)`, so the estimate depends only on
/// `(seed, b)` and a larger `b` extends a smaller one.
pub fn mc_gradient_estimate(problem: &ToyProblem, b: usize, seed: u64) -> Result<McGradient> {
    if b == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    let t = problem.tokens();
    let mut acc = Welford::new(t);
    let mut done = 0;
    let mut chunk = 0u64;
    while done < b {
        let n = CHUNK.min(b - done);
        let u = NoiseKey::new(seed, chunk, 0, 0).uniforms(n * t)?;
        let rows = problem.pathwise_rows(&u, n)?;
        for row in rows.chunks(t) {
            acc.push(row);
        }
        done += n;
        chunk += 1;
    }
    Ok(acc.finish())
}

/// REINFORCE on hard Bernoulli(p) masks: `L(z) (z − p) / (p (1 − p))`,
/// an unbiased estimate of the gradient w.r.t. `p`.
pub fn score_function_estimate(problem: &ToyProblem, b: usize, seed: u64) -> Result<McGradient> {
    if b == 0 {
        return Err(Error::contract("need at least one sample"));
    }
    let t = problem.tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Welford::new(t);
    let mut z = vec![0.0; t];
    let mut g = vec![0.0; t];
    for _ in 0..b {
        for (zj, &p) in z.iter_mut().zip(&problem.p) {
            *zj = if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
        }
        let loss = problem.loss_at(&z);
        for j in 0..t {
            let p = problem.p[j];
            g[j] = loss * (z[j] - p) / (p * (1.0 - p));
        }
        acc.push(&g);
    }
    Ok(acc.finish())
}

fn logit(x: f64) -> f64 {
    x.ln() - (1.0 - x).ln()
}

/// `E[z̃]` and `E[z̃²]` for logit `s` by midpoint quadrature over the
/// logistic noise `x`. Outside `[x0, x1]` the gate is clamped to 0 or 1, so
/// only the interior is integrated and `P(z̃ = 1) = σ(−x1)` is added.
pub fn relaxed_moments(s: f64, hc: &HardConcreteParams, points: usize) -> (f64, f64) {
    let width = hc.stretch_high - hc.stretch_low;
    let x0 = hc.beta * logit(-hc.stretch_low / width) - s;
    let x1 = hc.beta * logit((1.0 - hc.stretch_low) / width) - s;
    let h = (x1 - x0) / points as f64;
    let (mut m1, mut m2) = (0.0, 0.0);
    for i in 0..points {
        let x = x0 + (i as f64 + 0.5) * h;
        let density = sigmoid(x) * sigmoid(-x);
        let z = sigmoid((s + x) / hc.beta) * width + hc.stretch_low;
        m1 += z * density;
        m2 += z * z * density;
    }
    let top = sigmoid(-x1);
    (top + m1 * h, top + m2 * h)
}

/// Exact expectation of the loss under independent relaxed gates and its
/// gradient w.r.t. the logits, from quadrature moments and central
/// differences of those moments in `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedExact {
    pub expectation: f64,
    pub gradient: Vec<f64>,
}

pub fn relaxed_exact(problem: &ToyProblem, points: usize) -> Result<RelaxedExact> {
    let t = problem.tokens();
    if t > MAX_QUADRATURE_TOKENS {
        return Err(Error::contract(format!(
            "quadrature oracle covers at most {MAX_QUADRATURE_TOKENS} tokens, got {t}"
        )));
    }
    let hc = &problem.hc;
    let s = problem.logits();
    let h = 1e-4;
    let mut m1 = vec![0.0; t];
    let mut m2 = vec![0.0; t];
    let mut d1 = vec![0.0; t];
    let mut d2 = vec![0.0; t];
    for j in 0..t {
        (m1[j], m2[j]) = relaxed_moments(s[j], hc, points);
        let (a1, a2) = relaxed_moments(s[j] + h, hc, points);
        let (b1, b2) = relaxed_moments(s[j] - h, hc, points);
        d1[j] = (a1 - b1) / (2.0 * h);
        d2[j] = (a2 - b2) / (2.0 * h);
    }
    Ok(match &problem.loss {
        LossSpec::Constant { value } => RelaxedExact {
            expectation: *value,
            gradient: vec![0.0; t],
        },
        LossSpec::Linear { c } => RelaxedExact {
            expectation: c.iter().zip(&m1).map(|(c, m)| c * m).sum(),
            gradient: c.iter().zip(&d1).map(|(c, d)| c * d).collect(),
        },
        LossSpec::Quadratic { y, .. } => {
            // ‖Bz − y‖² = zᵀGz − 2 bᵀz + yᵀy with G = BᵀB, b = Bᵀy
            let m = problem.rows;
            let bm = &problem.design;
            let g = |i: usize, j: usize| (0..m).map(|r| bm[r * t + i] * bm[r * t + j]).sum::<f64>();
            let by = |i: usize| (0..m).map(|r| bm[r * t + i] * y[r]).sum::<f64>();
            let mut expectation: f64 = y.iter().map(|v| v * v).sum();
            let mut gradient = vec![0.0; t];
            for i in 0..t {
                expectation += g(i, i) * m2[i] - 2.0 * by(i) * m1[i];
                gradient[i] += g(i, i) * d2[i] - 2.0 * by(i) * d1[i];
                for j in 0..t {
                    if j != i {
                        expectation += g(i, j) * m1[i] * m1[j];
                        gradient[i] += 2.0 * g(i, j) * m1[j] * d1[i];
                    }
                }
            }
            RelaxedExact { expectation, gradient }
        }
    })
}

/// `diff / se`, with 0 when both vanish.
fn z_score(diff: f64, se: f64) -> f64 {
    if se == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / se
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Quadrature,
    MonteCarlo,
}

/// Score-function estimate on hard masks against the enumerated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlArm {
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub exact: Vec<f64>,
    pub z_scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub samples: usize,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub reference: Vec<f64>,
    /// Zero for the quadrature reference.
    pub reference_std_error: Vec<f64>,
    pub reference_kind: ReferenceKind,
    pub z_scores: Vec<f64>,
    pub max_abs_z: f64,
    /// Expected loss under the relaxed gates (quadrature only).
    pub relaxed_expectation: Option<f64>,
    /// Expected loss under Bernoulli(p) masks.
    pub bernoulli_expectation: f64,
    pub control: ControlArm,
}

/// Pathwise estimate with `b` samples against the exact relaxed gradient
/// (quadrature for up to three tokens, otherwise a run with `100·b`
/// samples on an independent stream).
pub fn unbiasedness_check(problem: &ToyProblem, b: usize, seed: u64) -> Result<UnbiasednessReport> {
    let est = mc_gradient_estimate(problem, b, seed)?;
    let se = est.std_errors();
    let t = problem.tokens();
    let (reference, reference_std_error, kind, relaxed) = if t <= MAX_QUADRATURE_TOKENS {
        let exact = relaxed_exact(problem, DEFAULT_QUADRATURE_POINTS)?;
        (
            exact.gradient,
            vec![0.0; t],
            ReferenceKind::Quadrature,
            Some(exact.expectation),
        )
    } else {
        let r = mc_gradient_estimate(problem, 100 * b, derive_seed(seed, 1))?;
        let rse = r.std_errors();
        (r.mean, rse, ReferenceKind::MonteCarlo, None)
    };
    let z_scores: Vec<f64> = (0..t)
        .map(|j| z_score(est.mean[j] - reference[j], se[j].hypot(reference_std_error[j])))
        .collect();
    let brute = brute_force_expected_loss(problem)?;
    let sf = score_function_estimate(problem, b, derive_seed(seed, 2))?;
    let sf_se = sf.std_errors();
    let control = ControlArm {
        z_scores: (0..t)
            .map(|j| z_score(sf.mean[j] - brute.gradient[j], sf_se[j]))
            .collect(),
        estimate: sf.mean,
        std_error: sf_se,
        exact: brute.gradient,
    };
    Ok(UnbiasednessReport {
        samples: b,
        max_abs_z: z_scores.iter().fold(0.0, |a: f64, z| a.max(z.abs())),
        estimate: est.mean,
        std_error: se,
        reference,
        reference_std_error,
        reference_kind: kind,
        z_scores,
        relaxed_expectation: relaxed,
        bernoulli_expectation: brute.expectation,
        control,
    })
}

/// Toys small enough for the quadrature oracle.
pub fn quadrature_suite() -> Result<Vec<ToyProblem>> {
    Ok(vec![
        ToyProblem::linear(vec![1.5], vec![0.4])?,
        ToyProblem::linear(vec![1.0, -2.0], vec![0.3, 0.7])?,
        ToyProblem::random_quadratic(2, 11)?,
        ToyProblem::random_quadratic(3, 12)?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceCurve {
    pub sample_counts: Vec<usize>,
    /// Trace of the covariance of the `B`-sample mean gradient.
    pub variances: Vec<f64>,
    /// Least-squares slope of `ln Var` against `ln B`; absent when degenerate.
    pub slope: Option<f64>,
    pub degenerate: bool,
}

impl VarianceCurve {
    /// `Var[B_{i+1}] / Var[B_i]` for consecutive entries.
    pub fn ratios(&self) -> Vec<f64> {
        self.variances.windows(2).map(|w| w[1] / w[0]).collect()
    }
}

/// Replicates the `B`-sample estimator `repeats` times per entry of
/// `sample_counts`. Replication `r` of entry `i` uses its own seed, so the
/// result does not depend on how replications are scheduled.
pub fn variance_curve(
    problem: &ToyProblem,
    sample_counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<VarianceCurve> {
    if sample_counts.len() < 3 || sample_counts[0] == 0 || sample_counts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract(format!(
            "sample counts {sample_counts:?} must be positive, strictly increasing, with at least 3 entries"
        )));
    }
    if repeats < 2 {
        return Err(Error::contract("need at least 2 replications"));
    }
    let mut variances: Vec<f64> = Vec::with_capacity(sample_counts.len());
    for (i, &b) in sample_counts.iter().enumerate() {
        let entry_seed = derive_seed(seed, i as u64);
        let means = (0..repeats)
            .into_par_iter()
            .map(|r| mc_gradient_estimate(problem, b, derive_seed(entry_seed, r as u64)).map(|g| g.mean))
            .collect::<Result<Vec<_>>>()?;
        let mut acc = Welford::new(problem.tokens());
        for m in &means {
            acc.push(m);
        }
        variances.push(acc.finish().variance.iter().sum());
    }
    let degenerate = variances.iter().any(|&v| !(v > 0.0 && v.is_finite()));
    let slope = (!degenerate).then(|| {
        let xs: Vec<f64> = sample_counts.iter().map(|&b| (b as f64).ln()).collect();
        let ys: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
        least_squares_slope(&xs, &ys)
    });
    Ok(VarianceCurve {
        sample_counts: sample_counts.to_vec(),
        variances,
        slope,
        degenerate,
    })
}

fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// `F(θ, p) = ½‖θ − A p‖² + ½ Σ κ_t (p_t − q_t)²` subject to `Σ p ≤ M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexToy {
    /// m×T.
    pub a: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub kappa: Vec<f64>,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktSolution {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: f64,
    pub loss: f64,
}

impl ConvexToy {
    /// Four tokens, unconstrained preference summing to 3.0, budget 2.0.
    pub fn binding() -> Self {
        Self {
            a: vec![
                vec![0.5, -0.2, 0.1, 0.3],
                vec![0.0, 0.4, -0.3, 0.2],
                vec![-0.1, 0.2, 0.3, -0.4],
            ],
            q: vec![0.9, 0.7, 0.6, 0.8],
            kappa: vec![1.0, 2.0, 1.5, 1.0],
            budget: 2.0,
        }
    }

    /// Same toy with the budget at `T`, where the constraint never binds.
    pub fn slack() -> Self {
        Self {
            budget: 4.0,
            ..Self::binding()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.q.len();
        if t == 0 || self.kappa.len() != t || self.a.is_empty() || self.a.iter().any(|r| r.len() != t) {
            return Err(Error::contract(
                "convex toy needs A of shape m×T and T entries of q and κ",
            ));
        }
        if self.kappa.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::contract("κ must be positive"));
        }
        if !(self.budget > 0.0) {
            return Err(Error::contract("budget must be positive"));
        }
        Ok(())
    }

    fn ap(&self, p: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .map(|r| r.iter().zip(p).map(|(a, p)| a * p).sum())
            .collect()
    }

    pub fn loss(&self, theta: &[f64], p: &[f64]) -> f64 {
        let fit: f64 = theta.iter().zip(self.ap(p)).map(|(t, a)| (t - a) * (t - a)).sum();
        let pull: f64 = (0..p.len()).map(|i| self.kappa[i] * (p[i] - self.q[i]).powi(2)).sum();
        0.5 * (fit + pull)
    }

    fn grads(&self, theta: &[f64], p: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let r: Vec<f64> = theta.iter().zip(self.ap(p)).map(|(t, a)| t - a).collect();
        let gp = (0..p.len())
            .map(|j| {
                let back: f64 = self.a.iter().zip(&r).map(|(row, ri)| row[j] * ri).sum();
                -back + self.kappa[j] * (p[j] - self.q[j]) + lambda
            })
            .collect();
        (r, gp)
    }

    /// Unconstrained minimiser of the Lagrangian at `lambda`: `θ = A p`,
    /// `p = q − λ/κ`. Errors if `p` leaves [0, 1].
    pub fn lagrangian_minimizer(&self, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.validate()?;
        let p: Vec<f64> = self.q.iter().zip(&self.kappa).map(|(q, k)| q - lambda / k).collect();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract(format!("minimiser {p:?} leaves the unit box")));
        }
        Ok((self.ap(&p), p))
    }

    /// Closed-form constrained optimum: `λ* = max(0, (Σq − M) / Σ 1/κ)`.
    /// Rounding is corrected downward so the returned point is feasible.
    pub fn kkt(&self) -> Result<KktSolution> {
        self.validate()?;
        let inv: f64 = self.kappa.iter().map(|k| 1.0 / k).sum();
        let lambda = ((self.q.iter().sum::<f64>() - self.budget) / inv).max(0.0);
        let (_, mut p) = self.lagrangian_minimizer(lambda)?;
        loop {
            let excess = p.iter().sum::<f64>() - self.budget;
            if excess <= 0.0 {
                break;
            }
            let top = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).expect("non-empty");
            p[top] -= excess;
        }
        let theta = self.ap(&p);
        Ok(KktSolution {
            loss: self.loss(&theta, &p),
            theta,
            p,
            lambda,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations_run: u64,
    pub diverged: bool,
    pub timescales_separated: bool,
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: f64,
    pub loss: f64,
    /// `Σp − M` at the final iterate.
    pub violation: f64,
    /// Euclidean distance of `(θ, p)` to the constrained optimum.
    pub distance: f64,
    pub optimum: KktSolution,
    pub lambda_last_quartile_mean: f64,
    pub lambda_last_quartile_range: f64,
    /// Range below 10% of the mean (or both zero).
    pub lambda_stable: bool,
    /// At most 1000 evenly spaced multiplier values.
    pub lambda_trace: Vec<f64>,
    pub certificates: Option<CertificateReport>,
}

const DIVERGENCE_LOSS: f64 = 1e6;

/// Three-timescale updates on the convex toy: a θ step, a projected p step
/// and a projected ascent step on λ per iteration, each with its own
/// step schedule. Gradient noise is Gaussian with standard deviation
/// `noise_std`, drawn from `seed`.
pub fn convergence_experiment(
    toy: &ConvexToy,
    schedules: &StepSchedules,
    iterations: u64,
    noise_std: f64,
    seed: u64,
    certificate_tol: f64,
) -> Result<ConvergenceReport> {
    toy.validate()?;
    schedules.validate_robbins_monro()?;
    if iterations == 0 {
        return Err(Error::contract("need at least one iteration"));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::config(format!("noise_std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let optimum = toy.kkt()?;
    let t = toy.q.len();
    let mut theta = vec![0.0; toy.a.len()];
    let mut p = vec![0.5; t];
    let mut state = LagrangeState::new(0.0);
    let mut lambdas: Vec<f64> = Vec::with_capacity(iterations as usize);
    let mut diverged = false;
    let mut run = 0;
    for k in 1..=iterations {
        let (alpha, beta, gamma) = schedules.steps(k)?;
        let lambda = state.lambda();
        let (gt, gp) = toy.grads(&theta, &p, lambda);
        let sum_p: f64 = p.iter().sum();
        for (th, g) in theta.iter_mut().zip(gt) {
            *th -= alpha * (g + noise.sample(&mut rng));
        }
        for (pj, g) in p.iter_mut().zip(gp) {
            *pj = (*pj - beta * (g + noise.sample(&mut rng))).clamp(0.0, 1.0);
        }
        state = ascend_lambda(state, k, sum_p, toy.budget, gamma)?;
        lambdas.push(state.lambda());
        run = k;
        let loss = toy.loss(&theta, &p);
        if !(loss.is_finite() && loss < DIVERGENCE_LOSS) {
            diverged = true;
            break;
        }
    }
    let lambda = state.lambda();
    let loss = toy.loss(&theta, &p);
    let violation = p.iter().sum::<f64>() - toy.budget;
    let distance = theta
        .iter()
        .zip(&optimum.theta)
        .chain(p.iter().zip(&optimum.p))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let tail = &lambdas[lambdas.len() * 3 / 4..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let (lo, hi) = tail.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let range = hi - lo;
    let stride = lambdas.len().div_ceil(1000).max(1);
    let certificates = if lambda > 0.0 && !diverged {
        let reference = FeasibleReference {
            loss: optimum.loss,
            sum_p: optimum.p.iter().sum(),
            budget: toy.budget,
        };
        Some(budget_certificates(
            loss + lambda * violation,
            loss,
            &reference,
            lambda,
            violation,
            certificate_tol,
        )?)
    } else {
        None
    };
    Ok(ConvergenceReport {
        iterations_run: run,
        diverged,
        timescales_separated: schedules.separated(),
        theta,
        p,
        lambda,
        loss,
        violation,
        distance,
        optimum,
        lambda_last_quartile_mean: tail_mean,
        lambda_last_quartile_range: range,
        lambda_stable: range == 0.0 || range < 0.1 * tail_mean,
        lambda_trace: lambdas.iter().step_by(stride).copied().collect(),
        certificates,
    })
}
