//! Exact backward dynamic programming on an [`RmdpInstance`].

use thiserror::Error;

use crate::bellman::{self, OperatorError};
use crate::model::{
    argmax_first, OperatorKind, PolicyTable, QTable, RmdpInstance, RobustOperatorSpec, ValueTable,
};

/// Threshold under which a stage-1 value counts as zero.
pub const VANISHING_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PlanningError {
    #[error("operator failed at stage {stage}, state {state}, action {action}: {source}")]
    Operator {
        stage: usize,
        state: usize,
        action: usize,
        #[source]
        source: OperatorError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid operator parameter {0}")]
    InvalidOperator(f64),
}

impl PlanningError {
    fn at(h: usize, s: usize, a: usize) -> impl FnOnce(OperatorError) -> PlanningError {
        move |source| PlanningError::Operator {
            stage: h + 1,
            state: s + 1,
            action: a + 1,
            source,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlanningResult {
    pub v_star: ValueTable,
    pub q_star: QTable,
    pub pi_star: PolicyTable,
    pub operator: RobustOperatorSpec,
}

/// Worst-case transition rows, indexed like the instance kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialKernel {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    rows: Vec<f64>,
}

impl AdversarialKernel {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let n = self.num_states;
        let start = ((h * n + s) * self.num_actions + a) * n;
        &self.rows[start..start + n]
    }

    /// The instance with its kernel replaced by these rows and radius zero.
    pub fn to_instance(&self, base: &RmdpInstance) -> RmdpInstance {
        RmdpInstance::from_fn(
            base.horizon(),
            base.num_states(),
            base.num_actions(),
            0.0,
            base.initial_state(),
            |h, s, a| self.row(h, s, a).to_vec(),
            |h, s, a| base.reward(h, s, a),
        )
        .expect("shapes copied from a valid instance")
    }
}

fn check_operator(spec: &RobustOperatorSpec) -> Result<(), PlanningError> {
    if spec.is_valid() {
        Ok(())
    } else {
        Err(PlanningError::InvalidOperator(spec.param))
    }
}

fn check_policy(instance: &RmdpInstance, policy: &PolicyTable) -> Result<(), PlanningError> {
    let dims = (
        instance.horizon(),
        instance.num_states(),
        instance.num_actions(),
    );
    let got = (policy.horizon(), policy.num_states(), policy.num_actions());
    if dims != got {
        return Err(PlanningError::Dimension(format!(
            "policy is (H={}, S={}, A={}), instance is (H={}, S={}, A={})",
            got.0, got.1, got.2, dims.0, dims.1, dims.2
        )));
    }
    Ok(())
}

fn backup_stage(
    instance: &RmdpInstance,
    spec: &RobustOperatorSpec,
    h: usize,
    next: &[f64],
    q: &mut QTable,
) -> Result<(), PlanningError> {
    let horizon = instance.horizon() as f64;
    for s in 0..instance.num_states() {
        for a in 0..instance.num_actions() {
            let p = instance.kernel_row(h, s, a);
            let ev = bellman::robust_value(spec, next, p, horizon)
                .map_err(PlanningError::at(h, s, a))?;
            q.set(h, s, a, instance.reward(h, s, a) + ev);
        }
    }
    Ok(())
}

/// Robust optimal values, Q-values and the greedy policy (smallest action on ties).
pub fn robust_value_iteration(
    instance: &RmdpInstance,
    spec: &RobustOperatorSpec,
) -> Result<PlanningResult, PlanningError> {
    check_operator(spec)?;
    let (hh, ns, na) = (
        instance.horizon(),
        instance.num_states(),
        instance.num_actions(),
    );
    let mut v = ValueTable::zeros(hh, ns);
    let mut q = QTable::zeros(hh, ns, na);
    let mut actions = vec![0usize; hh * ns];
    for h in (0..hh).rev() {
        let next = v.stage(h + 1).to_vec();
        backup_stage(instance, spec, h, &next, &mut q)?;
        for s in 0..ns {
            let a = argmax_first(q.row(h, s));
            actions[h * ns + s] = a;
            v.set(h, s, q.get(h, s, a));
        }
    }
    let pi_star =
        PolicyTable::deterministic(hh, ns, na, &actions).expect("greedy actions are in range");
    Ok(PlanningResult {
        v_star: v,
        q_star: q,
        pi_star,
        operator: *spec,
    })
}

/// Robust values of a fixed (possibly stochastic) policy.
pub fn robust_policy_evaluation(
    instance: &RmdpInstance,
    spec: &RobustOperatorSpec,
    policy: &PolicyTable,
) -> Result<(ValueTable, QTable), PlanningError> {
    check_operator(spec)?;
    check_policy(instance, policy)?;
    let (hh, ns, na) = (
        instance.horizon(),
        instance.num_states(),
        instance.num_actions(),
    );
    let mut v = ValueTable::zeros(hh, ns);
    let mut q = QTable::zeros(hh, ns, na);
    for h in (0..hh).rev() {
        let next = v.stage(h + 1).to_vec();
        backup_stage(instance, spec, h, &next, &mut q)?;
        for s in 0..ns {
            v.set(h, s, expected_under(policy.row(h, s), q.row(h, s)));
        }
    }
    Ok((v, q))
}

fn expected_under(probs: &[f64], values: &[f64]) -> f64 {
    probs
        .iter()
        .zip(values)
        .filter(|(&w, _)| w > 0.0)
        .map(|(w, x)| w * x)
        .sum()
}

/// Plain expectation-based policy evaluation under the instance's own kernel.
pub fn nominal_policy_evaluation(
    instance: &RmdpInstance,
    policy: &PolicyTable,
) -> Result<(ValueTable, QTable), PlanningError> {
    check_policy(instance, policy)?;
    let (hh, ns, na) = (
        instance.horizon(),
        instance.num_states(),
        instance.num_actions(),
    );
    let mut v = ValueTable::zeros(hh, ns);
    let mut q = QTable::zeros(hh, ns, na);
    for h in (0..hh).rev() {
        let next = v.stage(h + 1).to_vec();
        for s in 0..ns {
            for a in 0..na {
                let p = instance.kernel_row(h, s, a);
                let ev: f64 = p.iter().zip(&next).map(|(x, y)| x * y).sum();
                q.set(h, s, a, instance.reward(h, s, a) + ev);
            }
            v.set(h, s, expected_under(policy.row(h, s), q.row(h, s)));
        }
    }
    Ok((v, q))
}

/// Worst-case rows attained by the operator against the policy's robust values.
pub fn extract_adversarial_kernel(
    instance: &RmdpInstance,
    spec: &RobustOperatorSpec,
    policy: &PolicyTable,
) -> Result<AdversarialKernel, PlanningError> {
    let (v, _) = robust_policy_evaluation(instance, spec, policy)?;
    let (hh, ns, na) = (
        instance.horizon(),
        instance.num_states(),
        instance.num_actions(),
    );
    let horizon = hh as f64;
    let mut rows = Vec::with_capacity(hh * ns * na * ns);
    for h in 0..hh {
        let next = v.stage(h + 1);
        for s in 0..ns {
            for a in 0..na {
                let p = instance.kernel_row(h, s, a);
                let sol =
                    bellman::apply(spec, next, p, horizon).map_err(PlanningError::at(h, s, a))?;
                let q = sol.worst_case_distribution.ok_or(PlanningError::Operator {
                    stage: h + 1,
                    state: s + 1,
                    action: a + 1,
                    source: OperatorError::NoCertificate,
                })?;
                rows.extend_from_slice(&q);
            }
        }
    }
    Ok(AdversarialKernel {
        horizon: hh,
        num_states: ns,
        num_actions: na,
        rows,
    })
}

/// Spread of values at one stage (1-based) against the two theoretical bounds.
///
/// Both bounds are stated in terms of the relocated mass `m = rho / 2` (half
/// the L1 budget), the radius under which they are provable.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGap {
    pub stage: usize,
    pub value_gap: f64,
    pub q_gap: f64,
    /// `min{H, 1/m}`.
    pub coarse_bound: f64,
    /// `(1 - (1 - m)^(H - h + 1)) / m`, or `H - h + 1` at `m = 0`.
    pub stage_bound: f64,
    /// The stage bound evaluated at the full L1 budget instead of `m`. Not a
    /// valid bound; reported to show how far values can exceed it.
    pub budget_stage_bound: f64,
}

impl StageGap {
    pub fn within(&self, slack: f64) -> bool {
        self.value_gap <= self.coarse_bound.min(self.stage_bound) + slack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapReport {
    /// Relocated mass the bounds are evaluated at.
    pub relocated_mass: f64,
    pub stages: Vec<StageGap>,
}

impl GapReport {
    pub fn all_within(&self, slack: f64) -> bool {
        self.stages.iter().all(|g| g.within(slack))
    }
}

/// `(1 - (1 - m)^steps) / m`, or `steps` at `m = 0`.
pub fn geometric_bound(mass: f64, steps: usize) -> f64 {
    if mass == 0.0 {
        steps as f64
    } else {
        (1.0 - (1.0 - mass).powi(steps as i32)) / mass
    }
}

fn spread(values: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if lo.is_finite() {
        hi - lo
    } else {
        0.0
    }
}

/// Per-stage max-minus-min of `V*` and `Q*`. For the bounded-ratio operator
/// the bounds fall back to the number of remaining steps.
pub fn gap_diagnostic(result: &PlanningResult, instance: &RmdpInstance) -> GapReport {
    let budget = if result.operator.kind == OperatorKind::BoundedRatio {
        0.0
    } else {
        result.operator.param
    };
    let mass = budget / 2.0;
    let hh = instance.horizon();
    let coarse = if mass == 0.0 {
        hh as f64
    } else {
        (hh as f64).min(1.0 / mass)
    };
    let stages = (0..hh)
        .map(|h| {
            let steps = hh - h;
            StageGap {
                stage: h + 1,
                value_gap: spread(result.v_star.stage(h).iter().copied()),
                q_gap: spread(
                    (0..instance.num_states())
                        .flat_map(|s| result.q_star.row(h, s).iter().copied()),
                ),
                coarse_bound: coarse,
                stage_bound: geometric_bound(mass, steps),
                budget_stage_bound: geometric_bound(budget, steps),
            }
        })
        .collect();
    GapReport {
        relocated_mass: mass,
        stages,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanishingReport {
    pub holds: bool,
    pub min_value: f64,
    /// 0-based.
    pub argmin_state: usize,
    /// The initial state attains the minimum, which the assumption rules out.
    pub initial_state_attains_min: bool,
}

/// Checks whether `min_s V*_1(s)` vanishes under the full dual at the instance radius.
pub fn check_vanishing_minimal_value(
    instance: &RmdpInstance,
) -> Result<VanishingReport, PlanningError> {
    let result = robust_value_iteration(instance, &RobustOperatorSpec::for_instance(instance))?;
    let first = result.v_star.stage(0);
    let argmin = first
        .iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x < first[best] { i } else { best });
    let min_value = first[argmin];
    Ok(VanishingReport {
        holds: min_value <= VANISHING_TOL,
        min_value,
        argmin_state: argmin,
        initial_state_attains_min: first[instance.initial_state()] <= min_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: usize = 0;
    const BAD: usize = 1;

    /// Two-state example with relocated mass 0.2 (operator budget 0.4),
    /// built by hand so these tests do not depend on the generators.
    fn two_state_example(p: f64, q: f64) -> RmdpInstance {
        RmdpInstance::from_fn(
            3,
            2,
            2,
            0.4,
            GOOD,
            |h, s, a| match (h, s) {
                (_, GOOD) => vec![1.0, 0.0],
                (2, BAD) => vec![0.0, 1.0],
                _ => {
                    let up = if a == 0 { p } else { q };
                    vec![up, 1.0 - up]
                }
            },
            |_, s, _| if s == GOOD { 1.0 } else { 0.0 },
        )
        .unwrap()
    }

    fn standard_vi(inst: &RmdpInstance) -> Vec<Vec<f64>> {
        let (hh, ns, na) = (inst.horizon(), inst.num_states(), inst.num_actions());
        let mut v = vec![vec![0.0; ns]; hh + 1];
        for h in (0..hh).rev() {
            for s in 0..ns {
                let mut best = f64::NEG_INFINITY;
                for a in 0..na {
                    let mut x = inst.reward(h, s, a);
                    for (t, pr) in inst.kernel_row(h, s, a).iter().enumerate() {
                        x += pr * v[h + 1][t];
                    }
                    best = best.max(x);
                }
                v[h][s] = best;
            }
        }
        v
    }

    #[test]
    fn two_state_example_closed_forms() {
        let inst = two_state_example(0.8, 0.4);
        let res = robust_value_iteration(&inst, &RobustOperatorSpec::for_instance(&inst)).unwrap();
        assert!((res.q_star.get(1, BAD, 0) - 0.6).abs() < 1e-12);
        assert!((res.q_star.get(1, BAD, 1) - 0.2).abs() < 1e-12);
        assert!((res.v_star.get(1, GOOD) - 1.8).abs() < 1e-12);
        assert!((res.v_star.get(0, GOOD) - 2.56).abs() < 1e-12);
        assert_eq!(res.pi_star.action(1, BAD), Some(0));
    }

    #[test]
    fn wrong_action_at_bad_state() {
        let inst = two_state_example(0.8, 0.4);
        let pol = PolicyTable::deterministic(3, 2, 2, &[0, 0, 0, 1, 0, 0]).unwrap();
        let (v, _) =
            robust_policy_evaluation(&inst, &RobustOperatorSpec::for_instance(&inst), &pol)
                .unwrap();
        assert!((v.get(1, BAD) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn optimal_policy_evaluates_to_optimal_value() {
        let inst = two_state_example(0.8, 0.4);
        let spec = RobustOperatorSpec::for_instance(&inst);
        let res = robust_value_iteration(&inst, &spec).unwrap();
        let (v, _) = robust_policy_evaluation(&inst, &spec, &res.pi_star).unwrap();
        for h in 0..=3 {
            for s in 0..2 {
                assert!((v.get(h, s) - res.v_star.get(h, s)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn adversary_moves_relocated_mass_to_bad_state() {
        let inst = two_state_example(0.8, 0.4);
        let spec = RobustOperatorSpec::for_instance(&inst);
        let res = robust_value_iteration(&inst, &spec).unwrap();
        let ker = extract_adversarial_kernel(&inst, &spec, &res.pi_star).unwrap();
        for a in 0..2 {
            let row = ker.row(0, GOOD, a);
            assert!((row[GOOD] - 0.8).abs() < 1e-12 && (row[BAD] - 0.2).abs() < 1e-12);
        }
        let (nominal, _) =
            nominal_policy_evaluation(&ker.to_instance(&inst), &res.pi_star).unwrap();
        assert!((nominal.get(0, GOOD) - 2.56).abs() < 1e-9);
    }

    #[test]
    fn zero_radius_matches_standard_vi() {
        let inst = two_state_example(0.7, 0.3).with_rho(0.0);
        let res = robust_value_iteration(&inst, &RobustOperatorSpec::for_instance(&inst)).unwrap();
        let oracle = standard_vi(&inst);
        for (h, row) in oracle.iter().enumerate() {
            for (s, x) in row.iter().enumerate() {
                assert!((res.v_star.get(h, s) - x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let inst = RmdpInstance::from_fn(
            2,
            3,
            2,
            0.5,
            0,
            |_, _, _| vec![0.2, 0.3, 0.5],
            |_, _, _| 0.0,
        )
        .unwrap();
        let pol = PolicyTable::uniform(&inst);
        let (v, q) =
            robust_policy_evaluation(&inst, &RobustOperatorSpec::for_instance(&inst), &pol)
                .unwrap();
        assert!(v.to_nested().iter().flatten().all(|&x| x == 0.0));
        assert!(q.to_nested().iter().flatten().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn gap_bound_on_two_state_example() {
        let inst = two_state_example(0.8, 0.4);
        let res = robust_value_iteration(&inst, &RobustOperatorSpec::for_instance(&inst)).unwrap();
        let report = gap_diagnostic(&res, &inst);
        assert!((report.stages[0].stage_bound - 2.44).abs() < 1e-12);
        assert!(report.all_within(1e-9));
    }

    #[test]
    fn gap_bound_is_tight_and_exceeds_the_budget_reading() {
        // Budget 0.5 (mass 0.25): the rewarding state keeps 3/4 of its value.
        let inst = RmdpInstance::from_fn(
            2,
            2,
            1,
            0.5,
            0,
            |_, s, _| {
                if s == 0 {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            },
            |_, s, _| if s == 0 { 1.0 } else { 0.0 },
        )
        .unwrap();
        let res = robust_value_iteration(&inst, &RobustOperatorSpec::for_instance(&inst)).unwrap();
        let first = &gap_diagnostic(&res, &inst).stages[0];
        assert!((first.value_gap - 1.75).abs() < 1e-12);
        assert!((first.stage_bound - 1.75).abs() < 1e-12);
        assert!((first.budget_stage_bound - 1.5).abs() < 1e-12);
        assert!(first.within(1e-12));
    }

    #[test]
    fn zero_radius_bound_counts_remaining_steps() {
        let inst = two_state_example(0.8, 0.4).with_rho(0.0);
        let res = robust_value_iteration(&inst, &RobustOperatorSpec::for_instance(&inst)).unwrap();
        let report = gap_diagnostic(&res, &inst);
        let bounds: Vec<f64> = report.stages.iter().map(|g| g.stage_bound).collect();
        assert_eq!(bounds, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn identical_states_have_no_gap() {
        let inst = RmdpInstance::from_fn(
            4,
            3,
            2,
            0.3,
            0,
            |_, _, _| vec![0.5, 0.25, 0.25],
            |_, _, _| 0.5,
        )
        .unwrap();
        let res = robust_value_iteration(&inst, &RobustOperatorSpec::for_instance(&inst)).unwrap();
        let report = gap_diagnostic(&res, &inst);
        assert!(report
            .stages
            .iter()
            .all(|g| g.value_gap == 0.0 && g.q_gap == 0.0));
    }

    #[test]
    fn absorbing_zero_state_has_vanishing_value_without_fail_state() {
        // Relocated mass 0.2 (budget 0.4); the adversary can drain s2 into s1.
        let inst = RmdpInstance::from_fn(
            2,
            2,
            1,
            0.4,
            0,
            |_, s, _| {
                if s == 0 {
                    vec![0.8, 0.2]
                } else {
                    vec![0.0, 1.0]
                }
            },
            |_, s, _| if s == 1 { 1.0 } else { 0.0 },
        )
        .unwrap();
        let rep = check_vanishing_minimal_value(&inst).unwrap();
        assert!(rep.holds);
        assert_eq!(rep.argmin_state, 0);
        assert!(rep.min_value.abs() < 1e-12);
    }

    #[test]
    fn all_reward_instance_does_not_vanish() {
        let inst = RmdpInstance::from_fn(3, 2, 2, 0.0, 0, |_, _, _| vec![0.5, 0.5], |_, _, _| 1.0)
            .unwrap();
        let rep = check_vanishing_minimal_value(&inst).unwrap();
        assert!(!rep.holds);
        assert!((rep.min_value - 3.0).abs() < 1e-12);
        assert!(rep.initial_state_attains_min);
    }

    #[test]
    fn policy_dimension_mismatch_is_rejected() {
        let inst = two_state_example(0.8, 0.4);
        let pol = PolicyTable::deterministic(2, 2, 2, &[0; 4]).unwrap();
        assert!(matches!(
            robust_policy_evaluation(&inst, &RobustOperatorSpec::for_instance(&inst), &pol),
            Err(PlanningError::Dimension(_))
        ));
    }
}
