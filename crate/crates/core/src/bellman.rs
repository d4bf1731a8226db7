//! Robust expectation operators `inf_{q in P(s,a)} E_q[V]`.
//!
//! Two dual forms of the total-variation worst case are provided, both
//! maximizing a concave piecewise-linear function of a scalar `eta` over
//! `[0, H]`:
//!
//! ```text
//! full:       g(eta) = eta - E_p[(eta - V)_+] - (rho/2) * (eta - min V)_+
//! vanishing:  g(eta) = eta - E_p[(eta - V)_+] - (rho/2) * eta
//! ```
//!
//! The maximum sits on a breakpoint (`0`, `H`, `min V` or some `V(s)`), so the
//! operators sort once and evaluate every breakpoint exactly. Ties resolve to
//! the smallest `eta`.
//!
//! [`tv_primal_oracle`] builds the worst-case distribution directly (budget
//! `rho/2` of relocated mass) and never touches the dual; tests compare the
//! two routes. [`bounded_ratio_expectation`] handles the density-ratio set
//! `{q : q(s') <= p(s') / rho'}`.

use thiserror::Error;

use crate::model::{OperatorKind, RobustOperatorSpec};

/// Slack accepted on the total mass of an input distribution.
pub const INPUT_MASS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OperatorError {
    #[error("value vector has {values} entries but distribution has {probs}")]
    LengthMismatch { values: usize, probs: usize },
    #[error("empty state space")]
    Empty,
    #[error("value entry {index} = {value} is negative or not finite")]
    InvalidValue { index: usize, value: f64 },
    #[error("distribution entry {index} = {value} is negative or not finite")]
    InvalidProbability { index: usize, value: f64 },
    #[error("distribution sums to {0}, not 1")]
    NotStochastic(f64),
    #[error("TV radius {0} outside [0,1)")]
    InvalidRadius(f64),
    #[error("ratio parameter {0} outside (0,1]")]
    InvalidRatio(f64),
    #[error("horizon bound {0} must be positive and finite")]
    InvalidHorizon(f64),
    #[error("operator produced no worst-case distribution for this input")]
    NoCertificate,
}

/// Result of a robust expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    /// The robust expectation.
    pub value: f64,
    /// Maximizing dual variable. `None` for the primal oracle.
    pub eta_star: Option<f64>,
    /// A minimizing distribution, when one is available.
    pub worst_case_distribution: Option<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq)]
enum MassRule {
    /// `p` must sum to one.
    Stochastic,
    /// `p` may also be the all-zero row of an unvisited state-action pair.
    StochasticOrEmpty,
}

fn check_inputs(
    v: &[f64],
    p: &[f64],
    nonnegative_values: bool,
    rule: MassRule,
) -> Result<f64, OperatorError> {
    if v.len() != p.len() {
        return Err(OperatorError::LengthMismatch {
            values: v.len(),
            probs: p.len(),
        });
    }
    if v.is_empty() {
        return Err(OperatorError::Empty);
    }
    for (index, &value) in v.iter().enumerate() {
        if !value.is_finite() || (nonnegative_values && value < 0.0) {
            return Err(OperatorError::InvalidValue { index, value });
        }
    }
    let mut total = 0.0;
    for (index, &value) in p.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(OperatorError::InvalidProbability { index, value });
        }
        total += value;
    }
    let ok = (total - 1.0).abs() <= INPUT_MASS_TOL
        || (rule == MassRule::StochasticOrEmpty && total == 0.0);
    if !ok {
        return Err(OperatorError::NotStochastic(total));
    }
    Ok(total)
}

fn check_radius(rho: f64) -> Result<(), OperatorError> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(OperatorError::InvalidRadius(rho))
    }
}

fn check_horizon(horizon: f64) -> Result<(), OperatorError> {
    if horizon > 0.0 && horizon.is_finite() {
        Ok(())
    } else {
        Err(OperatorError::InvalidHorizon(horizon))
    }
}

/// Smallest index attaining the minimum.
fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Maximizes `eta - E_p[(eta - V)_+] - coef * (eta - floor)_+` over the
/// breakpoints in `[0, horizon]`. Returns `(max value, smallest maximizer)`.
fn maximize_dual(v: &[f64], p: &[f64], coef: f64, floor: f64, horizon: f64) -> (f64, f64) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));

    let mut candidates: Vec<f64> = Vec::with_capacity(v.len() + 3);
    candidates.push(0.0);
    candidates.push(horizon);
    if (0.0..=horizon).contains(&floor) {
        candidates.push(floor);
    }
    candidates.extend(v.iter().copied().filter(|x| (0.0..=horizon).contains(x)));
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let objective = |eta: f64, mass_below: f64, pv_below: f64| {
        eta - (eta * mass_below - pv_below) - coef * (eta - floor).max(0.0)
    };

    let mut values = Vec::with_capacity(candidates.len());
    let (mut next, mut mass_below, mut pv_below) = (0usize, 0.0f64, 0.0f64);
    for &eta in &candidates {
        while next < order.len() && v[order[next]] < eta {
            let i = order[next];
            mass_below += p[i];
            pv_below += p[i] * v[i];
            next += 1;
        }
        values.push(objective(eta, mass_below, pv_below));
    }

    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-14 * best.abs().max(horizon).max(1.0);
    let pick = values.iter().position(|&g| g >= best - tie).unwrap_or(0);
    (best, candidates[pick])
}

/// Builds the minimizer implied by an optimal `eta`: every state valued above
/// `eta` is emptied, states valued exactly `eta` give up what remains of the
/// `budget`, and the removed mass lands on the first minimizer of `V`.
fn certificate_from_eta(v: &[f64], p: &[f64], eta: f64, budget: f64) -> Vec<f64> {
    let sink = argmin_first(v);
    let mut q = p.to_vec();
    let mut removed = 0.0;
    for s in 0..v.len() {
        if s != sink && v[s] > eta {
            removed += q[s];
            q[s] = 0.0;
        }
    }
    let mut remaining = (budget - removed).max(0.0);
    for s in 0..v.len() {
        if remaining <= 0.0 {
            break;
        }
        if s != sink && v[s] == eta {
            let take = remaining.min(q[s]);
            q[s] -= take;
            removed += take;
            remaining -= take;
        }
    }
    q[sink] += removed;
    q
}

/// Full total-variation dual:
/// `sup_{eta in [0,H]} { -E_p[(eta-V)_+] - (rho/2) (eta - min V)_+ + eta }`.
///
/// `V` must be nonnegative; entries above `H` are accepted and only the `eta`
/// search is restricted to `[0, H]`. An all-zero `p` (an unvisited row) is
/// accepted and yields no certificate.
pub fn tv_dual_full(
    v: &[f64],
    p: &[f64],
    rho: f64,
    horizon: f64,
) -> Result<DualSolution, OperatorError> {
    check_radius(rho)?;
    check_horizon(horizon)?;
    let total = check_inputs(v, p, true, MassRule::StochasticOrEmpty)?;
    let floor = v.iter().copied().fold(f64::INFINITY, f64::min);
    let (value, eta) = maximize_dual(v, p, rho / 2.0, floor, horizon);
    let worst_case_distribution = (total > 0.0).then(|| certificate_from_eta(v, p, eta, rho / 2.0));
    Ok(DualSolution {
        value,
        eta_star: Some(eta),
        worst_case_distribution,
    })
}

/// Dual with the minimum of `V` replaced by zero:
/// `sup_{eta in [0,H]} { -E_p[(eta-V)_+] + (1 - rho/2) eta }`.
///
/// Coincides with [`tv_dual_full`] whenever `min V = 0`; a certificate is only
/// produced in that case. On an all-zero `p` the value is `(1 - rho/2) H`.
pub fn tv_dual_vanishing(
    v: &[f64],
    p: &[f64],
    rho: f64,
    horizon: f64,
) -> Result<DualSolution, OperatorError> {
    check_radius(rho)?;
    check_horizon(horizon)?;
    let total = check_inputs(v, p, true, MassRule::StochasticOrEmpty)?;
    let (value, eta) = maximize_dual(v, p, rho / 2.0, 0.0, horizon);
    let has_zero = v.contains(&0.0);
    let worst_case_distribution =
        (total > 0.0 && has_zero).then(|| certificate_from_eta(v, p, eta, rho / 2.0));
    Ok(DualSolution {
        value,
        eta_star: Some(eta),
        worst_case_distribution,
    })
}

/// Direct construction of the TV worst case: relocate up to `rho/2` of mass,
/// taken from the highest-valued states first, onto the first minimizer of `V`.
pub fn tv_primal_oracle(v: &[f64], p: &[f64], rho: f64) -> Result<DualSolution, OperatorError> {
    check_radius(rho)?;
    check_inputs(v, p, true, MassRule::Stochastic)?;
    let sink = argmin_first(v);
    let mut order: Vec<usize> = (0..v.len()).filter(|&s| s != sink).collect();
    // Highest value first; among equal values the larger index gives up mass first.
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(j.cmp(&i)));
    let mut q = p.to_vec();
    let mut budget = rho / 2.0;
    for s in order {
        if budget <= 0.0 {
            break;
        }
        let take = budget.min(q[s]);
        q[s] -= take;
        q[sink] += take;
        budget -= take;
    }
    let value = q.iter().zip(v).map(|(qi, vi)| qi * vi).sum();
    Ok(DualSolution {
        value,
        eta_star: None,
        worst_case_distribution: Some(q),
    })
}

/// `inf { E_q[V] : q in simplex, q(s') <= p(s') / rho' }`, solved by filling
/// states in increasing order of `V` up to their caps. States with
/// `p(s') = 0` have cap zero. `eta_star` is the value of the last state filled.
pub fn bounded_ratio_expectation(
    v: &[f64],
    p: &[f64],
    rho_prime: f64,
) -> Result<DualSolution, OperatorError> {
    if !(rho_prime > 0.0 && rho_prime <= 1.0) {
        return Err(OperatorError::InvalidRatio(rho_prime));
    }
    check_inputs(v, p, false, MassRule::Stochastic)?;
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut q = vec![0.0; v.len()];
    let mut left = 1.0f64;
    let mut threshold = v[order[0]];
    for s in order {
        if left <= 0.0 {
            break;
        }
        if p[s] == 0.0 {
            continue;
        }
        let take = (p[s] / rho_prime).min(left);
        q[s] = take;
        left -= take;
        threshold = v[s];
    }
    let value = q.iter().zip(v).map(|(qi, vi)| qi * vi).sum();
    Ok(DualSolution {
        value,
        eta_star: Some(threshold),
        worst_case_distribution: Some(q),
    })
}

/// Dispatches on the operator kind. `horizon` bounds the TV dual search.
pub fn apply(
    spec: &RobustOperatorSpec,
    v: &[f64],
    p: &[f64],
    horizon: f64,
) -> Result<DualSolution, OperatorError> {
    match spec.kind {
        OperatorKind::TvDualFull => tv_dual_full(v, p, spec.param, horizon),
        OperatorKind::TvDualVanishing => tv_dual_vanishing(v, p, spec.param, horizon),
        OperatorKind::BoundedRatio => bounded_ratio_expectation(v, p, spec.param),
    }
}

/// Full dual value with an arbitrary penalty coefficient in place of `rho / 2`.
/// Exists so the check suite can inject a wrong coefficient.
pub fn tv_dual_with_coefficient(
    v: &[f64],
    p: &[f64],
    coefficient: f64,
    horizon: f64,
) -> Result<f64, OperatorError> {
    check_horizon(horizon)?;
    check_inputs(v, p, true, MassRule::StochasticOrEmpty)?;
    let floor = v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(maximize_dual(v, p, coefficient, floor, horizon).0)
}

/// Value-only variant of [`apply`]; skips building a worst-case distribution.
pub fn robust_value(
    spec: &RobustOperatorSpec,
    v: &[f64],
    p: &[f64],
    horizon: f64,
) -> Result<f64, OperatorError> {
    match spec.kind {
        OperatorKind::TvDualFull => {
            check_radius(spec.param)?;
            check_horizon(horizon)?;
            check_inputs(v, p, true, MassRule::StochasticOrEmpty)?;
            let floor = v.iter().copied().fold(f64::INFINITY, f64::min);
            Ok(maximize_dual(v, p, spec.param / 2.0, floor, horizon).0)
        }
        OperatorKind::TvDualVanishing => {
            check_radius(spec.param)?;
            check_horizon(horizon)?;
            check_inputs(v, p, true, MassRule::StochasticOrEmpty)?;
            Ok(maximize_dual(v, p, spec.param / 2.0, 0.0, horizon).0)
        }
        OperatorKind::BoundedRatio => Ok(bounded_ratio_expectation(v, p, spec.param)?.value),
    }
}

/// `sum_s |q(s) - p(s)|`, the L1 transport budget used by `q`.
pub fn l1_distance(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(a, b)| (a - b).abs()).sum()
}

/// Largest violation of the ratio cap `q(s') <= p(s') / rho'` (zero when
/// feasible).
pub fn ratio_cap_excess(q: &[f64], p: &[f64], rho_prime: f64) -> f64 {
    q.iter()
        .zip(p)
        .map(|(qi, pi)| (qi - pi / rho_prime).max(0.0))
        .fold(0.0, f64::max)
}

/// Checks that `q` lies in the robust set of `p` for `spec` up to `tol`.
pub fn in_robust_set(spec: &RobustOperatorSpec, q: &[f64], p: &[f64], tol: f64) -> bool {
    let mass: f64 = q.iter().sum();
    if q.iter().any(|&x| x < -tol) || (mass - 1.0).abs() > tol.max(INPUT_MASS_TOL) {
        return false;
    }
    match spec.kind {
        OperatorKind::TvDualFull | OperatorKind::TvDualVanishing => {
            l1_distance(q, p) <= spec.param + tol
        }
        OperatorKind::BoundedRatio => ratio_cap_excess(q, p, spec.param) <= tol,
    }
}
