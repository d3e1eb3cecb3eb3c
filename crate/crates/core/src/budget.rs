//! Budget-constrained objective, projected dual ascent on the multiplier,
//! step-size schedules and slackness certificates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Expected retained-token budget, absolute or as a fraction of length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Absolute(f64),
    Ratio(f64),
}

impl Budget {
    /// Budget in tokens for a sequence of length `t`.
    pub fn resolve(&self, t: usize) -> Result<f64> {
        match *self {
            Budget::Absolute(m) => {
                if !(m > 0.0 && m <= t as f64) {
                    return Err(Error::config(format!("budget {m} must lie in (0, {t}]")));
                }
                Ok(m)
            }
            Budget::Ratio(rho) => {
                if !(rho > 0.0 && rho <= 1.0) {
                    return Err(Error::config(format!("retention ratio {rho} must lie in (0, 1]")));
                }
                Ok(rho * t as f64)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub budget: Budget,
    pub eta: f64,
    pub lambda_init: f64,
    /// Optimizer steps during which λ stays at `lambda_init`.
    #[serde(default)]
    pub warmup_steps: u64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Ratio(0.3),
            eta: 0.01,
            lambda_init: 0.0,
            warmup_steps: 0,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        match self.budget {
            Budget::Absolute(m) if !(m > 0.0 && m.is_finite()) => {
                return Err(Error::config(format!("budget {m} must be positive")));
            }
            Budget::Ratio(r) if !(r > 0.0 && r <= 1.0) => {
                return Err(Error::config(format!("retention ratio {r} must lie in (0, 1]")));
            }
            _ => {}
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("dual step size {} must be positive", self.eta)));
        }
        if !(self.lambda_init >= 0.0 && self.lambda_init.is_finite()) {
            return Err(Error::config(format!(
                "initial multiplier {} must be nonnegative",
                self.lambda_init
            )));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> LagrangeState {
        LagrangeState::new(self.lambda_init)
    }
}

/// The multiplier and the violations it has seen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    lambda: f64,
    history: Vec<(u64, f64)>,
}

impl LagrangeState {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda: lambda.max(0.0),
            history: Vec::new(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `(step, Σp − M)` for every update so far.
    pub fn violation_history(&self) -> &[(u64, f64)] {
        &self.history
    }
}

/// `task_loss + λ(Σp − M)` with λ held constant.
pub fn lagrangian_loss(tape: &mut Tape, task_loss: Var, p: Var, lambda: f64, budget: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("multiplier must be nonnegative, got {lambda}")));
    }
    let total = tape.sum(p)?;
    let violation = tape.offset(total, -budget)?;
    let penalty = tape.scale(violation, lambda)?;
    tape.add(task_loss, penalty)
}

/// Scalar form of [`lagrangian_loss`].
pub fn lagrangian_value(task_loss: f64, sum_p: f64, lambda: f64, budget: f64) -> f64 {
    task_loss + lambda * (sum_p - budget)
}

/// One projected ascent step: `λ ← max(0, λ + η(Σp − M))`.
pub fn ascend_lambda(mut state: LagrangeState, step: u64, sum_p: f64, budget: f64, eta: f64) -> Result<LagrangeState> {
    if !(eta > 0.0) {
        return Err(Error::contract(format!("dual step size must be positive, got {eta}")));
    }
    let violation = sum_p - budget;
    if !violation.is_finite() {
        return Err(Error::NonFinite { op: "ascend_lambda" });
    }
    state.lambda = (state.lambda + eta * violation).max(0.0);
    state.history.push((step, violation));
    Ok(state)
}

/// Power-law step sizes for the parameter, gate and multiplier updates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedules {
    pub theta_exponent: f64,
    pub p_exponent: f64,
    pub lambda_exponent: f64,
    pub theta_scale: f64,
    pub p_scale: f64,
    pub lambda_scale: f64,
}

impl Default for StepSchedules {
    fn default() -> Self {
        Self {
            theta_exponent: 0.6,
            p_exponent: 0.75,
            lambda_exponent: 0.9,
            theta_scale: 0.5,
            p_scale: 0.5,
            lambda_scale: 0.5,
        }
    }
}

impl StepSchedules {
    pub fn validate(&self) -> Result<()> {
        self.validate_robbins_monro()?;
        if !self.separated() {
            let exps = [self.theta_exponent, self.p_exponent, self.lambda_exponent];
            return Err(Error::config(format!(
                "schedule exponents {exps:?} must increase from parameters to multiplier"
            )));
        }
        Ok(())
    }

    /// Checks each schedule on its own: exponent in (0.5, 1], positive scale.
    pub fn validate_robbins_monro(&self) -> Result<()> {
        let exps = [self.theta_exponent, self.p_exponent, self.lambda_exponent];
        if exps.iter().any(|&e| !(e > 0.5 && e <= 1.0)) {
            return Err(Error::config(format!(
                "schedule exponents {exps:?} must lie in (0.5, 1]"
            )));
        }
        let scales = [self.theta_scale, self.p_scale, self.lambda_scale];
        if scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("schedule scales {scales:?} must be positive")));
        }
        Ok(())
    }

    /// Parameters on the fastest timescale, the multiplier on the slowest.
    pub fn separated(&self) -> bool {
        self.theta_exponent < self.p_exponent && self.p_exponent < self.lambda_exponent
    }

    /// Step sizes `(α_k, β_k, γ_k)` at iteration `k ≥ 1`.
    pub fn steps(&self, k: u64) -> Result<(f64, f64, f64)> {
        if k == 0 {
            return Err(Error::contract("schedule iterations start at 1"));
        }
        let k = k as f64;
        Ok((
            self.theta_scale * k.powf(-self.theta_exponent),
            self.p_scale * k.powf(-self.p_exponent),
            self.lambda_scale * k.powf(-self.lambda_exponent),
        ))
    }
}

/// Loss of a reference run together with the evidence that it is feasible.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibleReference {
    pub loss: f64,
    pub sum_p: f64,
    pub budget: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// Nonnegative exactly when the check passes.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub lambda: f64,
    pub slack: f64,
    pub tolerance: f64,
    /// True when the trained point already meets the budget.
    pub vacuous: bool,
    pub duality_gap: f64,
    pub checks: Vec<Check>,
}

impl CertificateReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub const DEFAULT_CERTIFICATE_TOL: f64 = 1e-3;

/// Slackness and duality-gap checks for a trained point with task loss `L`,
/// Lagrangian value `trained_lagrangian`, multiplier `λ` and overshoot
/// `Δ = Σp − M`, against a feasible reference loss `F̂`.
///
/// * `value`: `L + λΔ ≤ F̂ + tol`
/// * `slack`: `Δ ≤ (F̂ − L)/λ + tol`
/// * `gap`: `F̂ − trained_lagrangian ≥ λΔ − tol`
///
/// When `Δ ≤ 0` the budget is already met and every check passes with margins
/// `λ|Δ|`, `|Δ|` and `λ|Δ|`.
pub fn budget_certificates(
    trained_lagrangian: f64,
    trained_task_loss: f64,
    reference: &FeasibleReference,
    lambda: f64,
    slack: f64,
    tol: f64,
) -> Result<CertificateReport> {
    if !(lambda > 0.0) {
        return Err(Error::contract(format!(
            "certificates need a positive multiplier, got {lambda}"
        )));
    }
    if reference.sum_p > reference.budget {
        return Err(Error::contract(format!(
            "reference run is infeasible: expected retention {} exceeds budget {} by {}",
            reference.sum_p,
            reference.budget,
            reference.sum_p - reference.budget
        )));
    }
    let f_hat = reference.loss;
    let l = trained_task_loss;
    let gap = f_hat - trained_lagrangian;
    let vacuous = slack <= 0.0;
    let check = |name: &str, lhs: f64, rhs: f64, vacuous_margin: f64| {
        let margin = if vacuous { vacuous_margin } else { rhs + tol - lhs };
        Check {
            name: name.to_owned(),
            lhs,
            rhs,
            margin,
            pass: margin >= 0.0,
        }
    };
    let checks = vec![
        check("value", l + lambda * slack, f_hat, lambda * slack.abs()),
        check("slack", slack, (f_hat - l) / lambda, slack.abs()),
        // rewritten as λΔ ≤ gap so that the margin reads the same way
        check("gap", lambda * slack, gap, lambda * slack.abs()),
    ];
    Ok(CertificateReport {
        lambda,
        slack,
        tolerance: tol,
        vacuous,
        duality_gap: gap,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::{grad_check, Tensor};

    #[test]
    fn lagrangian_examples() {
        assert_eq!(lagrangian_value(1.0, 10.0, 0.5, 12.0), 0.0);
        assert_eq!(lagrangian_value(1.0, 10.0, 0.0, 12.0), 1.0);
        assert_eq!(lagrangian_value(2.0, 7.0, 3.0, 7.0), 2.0);
        let mut tape = Tape::new();
        let task = tape.constant(1, 1, vec![1.0]).unwrap();
        let p = tape.constant(4, 1, vec![2.5; 4]).unwrap();
        let out = lagrangian_loss(&mut tape, task, p, 0.5, 12.0).unwrap();
        assert_eq!(tape.scalar(out), 0.0);
        assert!(lagrangian_loss(&mut tape, task, p, -0.1, 12.0).is_err());
    }

    #[test]
    fn ascent_examples() {
        let s = ascend_lambda(LagrangeState::new(0.0), 1, 10.0, 12.0, 0.01).unwrap();
        assert_eq!(s.lambda(), 0.0);
        let s = ascend_lambda(LagrangeState::new(1.0), 1, 17.0, 12.0, 0.01).unwrap();
        assert!((s.lambda() - 1.05).abs() < 1e-15);
        let s = ascend_lambda(LagrangeState::new(0.03), 2, 7.0, 12.0, 0.01).unwrap();
        assert_eq!(s.lambda(), 0.0);
        assert_eq!(s.violation_history(), &[(2, -5.0)]);
        assert!(ascend_lambda(LagrangeState::new(0.0), 1, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::Ratio(0.5).resolve(10).unwrap(), 5.0);
        assert_eq!(Budget::Absolute(3.0).resolve(10).unwrap(), 3.0);
        assert!(Budget::Absolute(11.0).resolve(10).is_err());
        assert!(Budget::Ratio(0.0).resolve(10).is_err());
        assert!(BudgetConfig {
            eta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BudgetConfig {
            lambda_init: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn schedule_examples() {
        let s = StepSchedules::default();
        s.validate().unwrap();
        assert_eq!(s.steps(1).unwrap(), (s.theta_scale, s.p_scale, s.lambda_scale));
        let (a, b, c) = s.steps(1_000_000).unwrap();
        assert!(a > b && b > c && a < 1e-3);
        assert!(s.steps(0).is_err());
        let flat = StepSchedules { p_exponent: 0.6, ..s };
        assert!(flat.validate().is_err());
        let slow = StepSchedules {
            theta_exponent: 0.5,
            ..s
        };
        assert!(slow.validate().is_err());
    }

    #[test]
    fn robbins_monro_partial_sums() {
        let s = StepSchedules::default();
        let checkpoints = [10_000u64, 100_000, 1_000_000];
        let mut sums = [[0.0f64; 3]; 3];
        let mut squares = [[0.0f64; 3]; 3];
        let (mut acc, mut acc2) = ([0.0f64; 3], [0.0f64; 3]);
        let mut next = 0;
        for k in 1..=checkpoints[2] {
            let (a, b, c) = s.steps(k).unwrap();
            for (i, x) in [a, b, c].into_iter().enumerate() {
                acc[i] += x;
                acc2[i] += x * x;
            }
            if k == checkpoints[next] {
                sums[next] = acc;
                squares[next] = acc2;
                next += 1;
            }
        }
        for i in 0..3 {
            // each decade adds more than the previous one to the plain sum
            let g1 = sums[1][i] - sums[0][i];
            let g2 = sums[2][i] - sums[1][i];
            assert!(g2 > g1, "sum {i}");
            // squared sums settle: the increments shrink geometrically
            let h1 = squares[1][i] - squares[0][i];
            let h2 = squares[2][i] - squares[1][i];
            assert!(h2 < h1, "square {i}");
        }
    }

    #[test]
    fn certificate_example() {
        let reference = FeasibleReference {
            loss: 1.5,
            sum_p: 4.0,
            budget: 5.0,
        };
        let r = budget_certificates(1.2, 1.0, &reference, 2.0, 0.1, 1e-3).unwrap();
        assert!(!r.vacuous);
        assert_eq!(r.checks[0].lhs, 1.2);
        assert!((r.checks[1].rhs - 0.25).abs() < 1e-15);
        assert!(r.checks[0].pass && r.checks[1].pass);
        // gap 0.3 ≥ λΔ = 0.2
        assert!(r.checks[2].pass);
        assert!((r.duality_gap - 0.3).abs() < 1e-15);
    }

    #[test]
    fn certificate_vacuous_when_feasible() {
        let reference = FeasibleReference {
            loss: 0.9,
            sum_p: 4.0,
            budget: 5.0,
        };
        let r = budget_certificates(0.8, 1.0, &reference, 2.0, -0.1, 1e-3).unwrap();
        assert!(r.vacuous && r.all_pass());
        assert!(r.checks.iter().all(|c| c.margin >= 0.0));
    }

    #[test]
    fn certificate_rejects_infeasible_reference() {
        let reference = FeasibleReference {
            loss: 1.5,
            sum_p: 6.0,
            budget: 5.0,
        };
        let err = budget_certificates(1.2, 1.0, &reference, 2.0, 0.1, 1e-3).unwrap_err();
        assert!(err.to_string().contains("infeasible"));
        assert!(budget_certificates(
            1.2,
            1.0,
            &FeasibleReference {
                sum_p: 4.0,
                ..reference
            },
            0.0,
            0.1,
            1e-3
        )
        .is_err());
    }

    /// Exact minimizer of `½Σκ(p−q)² + λ(Σp − M)` for λ below the dual optimum.
    /// The value and slack checks always hold there; the gap check holds only
    /// while λ ≤ λ*/3.
    #[test]
    fn certificates_on_separable_quadratic() {
        let kappa = [1.0, 2.0, 4.0];
        let q = [0.9, 0.8, 0.7];
        let budget = 1.5;
        let inv: f64 = kappa.iter().map(|k| 1.0 / k).sum();
        let lambda_star = (q.iter().sum::<f64>() - budget) / inv;
        let f = |p: &[f64]| -> f64 {
            p.iter()
                .zip(&q)
                .zip(&kappa)
                .map(|((p, q), k)| 0.5 * k * (p - q) * (p - q))
                .sum()
        };
        let p_star: Vec<f64> = q.iter().zip(&kappa).map(|(q, k)| q - lambda_star / k).collect();
        let reference = FeasibleReference {
            loss: f(&p_star),
            sum_p: p_star.iter().sum(),
            budget: budget + 1e-12,
        };
        for (frac, gap_holds) in [(0.2, true), (0.3, true), (0.5, false), (0.9, false)] {
            let lambda = frac * lambda_star;
            let p: Vec<f64> = q.iter().zip(&kappa).map(|(q, k)| q - lambda / k).collect();
            let slack = p.iter().sum::<f64>() - budget;
            let l = f(&p);
            let r = budget_certificates(
                lagrangian_value(l, slack + budget, lambda, budget),
                l,
                &reference,
                lambda,
                slack,
                0.0,
            )
            .unwrap();
            assert!(r.checks[0].pass && r.checks[1].pass, "{frac}");
            assert_eq!(r.checks[2].pass, gap_holds, "{frac}");
        }
    }

    #[test]
    fn lagrangian_gradient_matches_finite_differences() {
        let p = Tensor::column_vector(&[0.2, 0.7, 0.4, 0.9]).unwrap();
        let err = grad_check(
            |t, pv| {
                let sq = t.mul(pv, pv)?;
                let task = t.sum(sq)?;
                lagrangian_loss(t, task, pv, 0.7, 1.5)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
        let mut tape = Tape::new();
        let pv = tape.leaf(&p.clone().with_grad()).unwrap();
        let sq = tape.mul(pv, pv).unwrap();
        let task = tape.sum(sq).unwrap();
        let out = lagrangian_loss(&mut tape, task, pv, 0.7, 1.5).unwrap();
        let g = tape.backward(out).unwrap();
        for (i, gi) in g.get(pv).unwrap().iter().enumerate() {
            assert!((gi - (2.0 * p.data()[i] + 0.7)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn multiplier_stays_nonnegative(
            lambda0 in 0.0f64..5.0,
            violations in proptest::collection::vec(-10.0f64..10.0, 1..200),
            eta in 1e-4f64..1.0,
        ) {
            let mut state = LagrangeState::new(lambda0);
            let mut prev = state.lambda();
            for (k, v) in violations.iter().enumerate() {
                state = ascend_lambda(state, k as u64, 5.0 + v, 5.0, eta).unwrap();
                prop_assert!(state.lambda() >= 0.0);
                if *v <= 0.0 {
                    prop_assert!(state.lambda() <= prev);
                }
                prev = state.lambda();
            }
        }
    }
}
