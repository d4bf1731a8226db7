//! Tabular finite-horizon robust MDP model.
//!
//! An [`RmdpInstance`] holds the nominal (training) kernel `P*_h(s'|s,a)`, the
//! deterministic rewards `R_h(s,a)`, the robust radius and the initial state.
//! Stages, states and actions are 0-based in memory. The on-disk JSON format
//! and every human-facing report use 1-based indices for stages and for the
//! initial state.
//!
//! # Radius convention
//!
//! The robust radius `rho` of an instance is the L1 budget of the
//! total-variation ball: the robust set at `(h,s,a)` is
//! `{q : sum_s' |q(s') - P*_h(s'|s,a)| <= rho}`, so an adversary relocates at
//! most `rho / 2` of probability mass. The dual operators in
//! [`crate::bellman`] are written against this convention.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on kernel and policy row sums.
pub const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid instance: {0}")]
    Invalid(ValidationReport),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
}

/// The nominal tabular model shared by every other module.
#[derive(Debug, Clone, PartialEq)]
pub struct RmdpInstance {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    /// Flattened `[h][s][a][s']`.
    kernel: Vec<f64>,
    /// Flattened `[h][s][a]`.
    rewards: Vec<f64>,
    rho: f64,
    initial_state: usize,
}

impl RmdpInstance {
    /// Builds an instance from flattened tables. Only shapes are checked here;
    /// use [`RmdpInstance::validate`] for the numeric invariants.
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        kernel: Vec<f64>,
        rewards: Vec<f64>,
        rho: f64,
        initial_state: usize,
    ) -> Result<Self, ModelError> {
        if horizon == 0 || num_states == 0 || num_actions == 0 {
            return Err(ModelError::Dimension(format!(
                "H, S, A must be positive (got H={horizon}, S={num_states}, A={num_actions})"
            )));
        }
        let sa = horizon * num_states * num_actions;
        if rewards.len() != sa {
            return Err(ModelError::Dimension(format!(
                "rewards has {} entries, expected H*S*A = {sa}",
                rewards.len()
            )));
        }
        if kernel.len() != sa * num_states {
            return Err(ModelError::Dimension(format!(
                "kernel has {} entries, expected H*S*A*S = {}",
                kernel.len(),
                sa * num_states
            )));
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            kernel,
            rewards,
            rho,
            initial_state,
        })
    }

    /// Builds an instance by evaluating `row(h, s, a)` and `reward(h, s, a)`
    /// over every stage, state and action.
    pub fn from_fn<K, R>(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        rho: f64,
        initial_state: usize,
        mut row: K,
        mut reward: R,
    ) -> Result<Self, ModelError>
    where
        K: FnMut(usize, usize, usize) -> Vec<f64>,
        R: FnMut(usize, usize, usize) -> f64,
    {
        let mut kernel = Vec::with_capacity(horizon * num_states * num_actions * num_states);
        let mut rewards = Vec::with_capacity(horizon * num_states * num_actions);
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let r = row(h, s, a);
                    if r.len() != num_states {
                        return Err(ModelError::Dimension(format!(
                            "kernel row at (h={}, s={}, a={}) has {} entries, expected {num_states}",
                            h + 1,
                            s + 1,
                            a + 1,
                            r.len()
                        )));
                    }
                    kernel.extend_from_slice(&r);
                    rewards.push(reward(h, s, a));
                }
            }
        }
        Self::new(
            horizon,
            num_states,
            num_actions,
            kernel,
            rewards,
            rho,
            initial_state,
        )
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    #[inline]
    fn sa_index(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    /// Nominal next-state distribution `P*_h(.|s,a)`.
    #[inline]
    pub fn kernel_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = self.sa_index(h, s, a) * self.num_states;
        &self.kernel[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, h: usize, s: usize, a: usize) -> f64 {
        self.rewards[self.sa_index(h, s, a)]
    }

    /// Copy of this instance with a different robust radius.
    pub fn with_rho(&self, rho: f64) -> Self {
        Self {
            rho,
            ..self.clone()
        }
    }

    /// Copy of this instance with a different initial state.
    pub fn with_initial_state(&self, initial_state: usize) -> Self {
        Self {
            initial_state,
            ..self.clone()
        }
    }

    /// Checks every numeric invariant and returns all violations found.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if !(0.0..1.0).contains(&self.rho) || !self.rho.is_finite() {
            violations.push(Violation::RadiusOutOfRange { rho: self.rho });
        }
        if self.initial_state >= self.num_states {
            violations.push(Violation::InitialStateOutOfRange {
                state: self.initial_state,
                num_states: self.num_states,
            });
        }
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let r = self.reward(h, s, a);
                    if !(0.0..=1.0).contains(&r) || !r.is_finite() {
                        violations.push(Violation::RewardOutOfRange { h, s, a, value: r });
                    }
                    let row = self.kernel_row(h, s, a);
                    for (next, &p) in row.iter().enumerate() {
                        if !(p >= 0.0) || !p.is_finite() {
                            violations.push(Violation::NegativeProbability {
                                h,
                                s,
                                a,
                                next,
                                value: p,
                            });
                        }
                    }
                    let sum: f64 = row.iter().sum();
                    if !((sum - 1.0).abs() <= PROB_TOL) {
                        violations.push(Violation::KernelRowSum { h, s, a, sum });
                    }
                }
            }
        }
        ValidationReport { violations }
    }

    /// Validates and converts violations into an error.
    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let report = self.validate();
        if report.is_ok() {
            Ok(())
        } else {
            Err(ModelError::Invalid(report))
        }
    }

    pub fn to_file_format(&self) -> InstanceFile {
        let (hh, ss, aa) = (self.horizon, self.num_states, self.num_actions);
        InstanceFile {
            horizon: hh,
            num_states: ss,
            num_actions: aa,
            rho: self.rho,
            initial_state: self.initial_state + 1,
            rewards: (0..hh)
                .map(|h| {
                    (0..ss)
                        .map(|s| (0..aa).map(|a| self.reward(h, s, a)).collect())
                        .collect()
                })
                .collect(),
            kernel: (0..hh)
                .map(|h| {
                    (0..ss)
                        .map(|s| (0..aa).map(|a| self.kernel_row(h, s, a).to_vec()).collect())
                        .collect()
                })
                .collect(),
        }
    }

    /// Converts a parsed document into an instance. Kernel rows whose sum is
    /// within [`PROB_TOL`] of one are renormalized.
    pub fn from_file_format(file: &InstanceFile) -> Result<Self, ModelError> {
        let (hh, ss, aa) = (file.horizon, file.num_states, file.num_actions);
        if file.rewards.len() != hh || file.kernel.len() != hh {
            return Err(ModelError::Dimension(format!(
                "expected {hh} stages in rewards and kernel"
            )));
        }
        if file.initial_state == 0 {
            return Err(ModelError::Dimension(
                "initial_state is 1-based and must be at least 1".into(),
            ));
        }
        let mut kernel = Vec::with_capacity(hh * ss * aa * ss);
        let mut rewards = Vec::with_capacity(hh * ss * aa);
        for h in 0..hh {
            if file.rewards[h].len() != ss || file.kernel[h].len() != ss {
                return Err(ModelError::Dimension(format!(
                    "stage {} must list {ss} states",
                    h + 1
                )));
            }
            for s in 0..ss {
                if file.rewards[h][s].len() != aa || file.kernel[h][s].len() != aa {
                    return Err(ModelError::Dimension(format!(
                        "stage {}, state {} must list {aa} actions",
                        h + 1,
                        s + 1
                    )));
                }
                for a in 0..aa {
                    rewards.push(file.rewards[h][s][a]);
                    let row = &file.kernel[h][s][a];
                    if row.len() != ss {
                        return Err(ModelError::Dimension(format!(
                            "kernel row at (h={}, s={}, a={}) must have {ss} entries",
                            h + 1,
                            s + 1,
                            a + 1
                        )));
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() <= PROB_TOL && sum != 1.0 {
                        kernel.extend(row.iter().map(|p| p / sum));
                    } else {
                        kernel.extend_from_slice(row);
                    }
                }
            }
        }
        Self::new(
            hh,
            ss,
            aa,
            kernel,
            rewards,
            file.rho,
            file.initial_state - 1,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_format()).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: InstanceFile = serde_json::from_str(text)?;
        Self::from_file_format(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// On-disk layout of an instance. Stage and state arrays are positional;
/// `initial_state` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    pub rho: f64,
    pub initial_state: usize,
    pub rewards: Vec<Vec<Vec<f64>>>,
    pub kernel: Vec<Vec<Vec<Vec<f64>>>>,
}

/// One broken invariant. Indices are stored 0-based and displayed 1-based.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    KernelRowSum {
        h: usize,
        s: usize,
        a: usize,
        sum: f64,
    },
    NegativeProbability {
        h: usize,
        s: usize,
        a: usize,
        next: usize,
        value: f64,
    },
    RewardOutOfRange {
        h: usize,
        s: usize,
        a: usize,
        value: f64,
    },
    RadiusOutOfRange {
        rho: f64,
    },
    InitialStateOutOfRange {
        state: usize,
        num_states: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Violation::KernelRowSum { h, s, a, sum } => write!(
                f,
                "kernel row (h={}, s={}, a={}) sums to {sum}, not 1",
                h + 1,
                s + 1,
                a + 1
            ),
            Violation::NegativeProbability {
                h,
                s,
                a,
                next,
                value,
            } => write!(
                f,
                "kernel entry (h={}, s={}, a={}, s'={}) = {value} is not a probability",
                h + 1,
                s + 1,
                a + 1,
                next + 1
            ),
            Violation::RewardOutOfRange { h, s, a, value } => write!(
                f,
                "reward out of [0,1] at (h={}, s={}, a={}): {value}",
                h + 1,
                s + 1,
                a + 1
            ),
            Violation::RadiusOutOfRange { rho } => write!(f, "robust radius {rho} outside [0,1)"),
            Violation::InitialStateOutOfRange { state, num_states } => {
                write!(f, "initial state {} outside 1..={num_states}", state + 1)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", lines.join("; "))
    }
}

/// Stage-indexed Markov policy `pi_h(a|s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    /// Flattened `[h][s][a]`.
    probs: Vec<f64>,
}

impl PolicyTable {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        probs: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if probs.len() != horizon * num_states * num_actions {
            return Err(ModelError::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                horizon * num_states * num_actions
            )));
        }
        let policy = Self {
            horizon,
            num_states,
            num_actions,
            probs,
        };
        policy.check_rows()?;
        Ok(policy)
    }

    /// Point-mass policy from `actions[h * S + s]`.
    pub fn deterministic(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        actions: &[usize],
    ) -> Result<Self, ModelError> {
        if actions.len() != horizon * num_states {
            return Err(ModelError::Dimension(format!(
                "expected {} actions, got {}",
                horizon * num_states,
                actions.len()
            )));
        }
        let mut probs = vec![0.0; horizon * num_states * num_actions];
        for (i, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(ModelError::InvalidPolicy(format!(
                    "action {} out of range",
                    a + 1
                )));
            }
            probs[i * num_actions + a] = 1.0;
        }
        Ok(Self {
            horizon,
            num_states,
            num_actions,
            probs,
        })
    }

    /// Uniform distribution over actions in every row.
    pub fn uniform(instance: &RmdpInstance) -> Self {
        let (h, s, a) = (
            instance.horizon(),
            instance.num_states(),
            instance.num_actions(),
        );
        Self {
            horizon: h,
            num_states: s,
            num_actions: a,
            probs: vec![1.0 / a as f64; h * s * a],
        }
    }

    fn check_rows(&self) -> Result<(), ModelError> {
        for h in 0..self.horizon {
            for s in 0..self.num_states {
                let row = self.row(h, s);
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(ModelError::InvalidPolicy(format!(
                        "row (h={}, s={}) has a negative or non-finite entry",
                        h + 1,
                        s + 1
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(ModelError::InvalidPolicy(format!(
                        "row (h={}, s={}) sums to {sum}",
                        h + 1,
                        s + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn prob(&self, h: usize, s: usize, a: usize) -> f64 {
        self.row(h, s)[a]
    }

    /// True when every row is a point mass.
    pub fn is_deterministic(&self) -> bool {
        (0..self.horizon).all(|h| (0..self.num_states).all(|s| self.action(h, s).is_some()))
    }

    /// The action of a point-mass row, if the row is one.
    pub fn action(&self, h: usize, s: usize) -> Option<usize> {
        let row = self.row(h, s);
        let mut found = None;
        for (a, &p) in row.iter().enumerate() {
            if p == 1.0 && found.is_none() {
                found = Some(a);
            } else if p != 0.0 {
                return None;
            }
        }
        found
    }

    /// Draws an action from `pi_h(.|s)`.
    pub fn sample<R: Rng + ?Sized>(&self, h: usize, s: usize, rng: &mut R) -> usize {
        if let Some(a) = self.action(h, s) {
            return a;
        }
        let row = self.row(h, s);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    pub fn to_file_format(&self) -> PolicyFile {
        PolicyFile {
            horizon: self.horizon,
            num_states: self.num_states,
            num_actions: self.num_actions,
            probs: (0..self.horizon)
                .map(|h| {
                    (0..self.num_states)
                        .map(|s| self.row(h, s).to_vec())
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_file_format(file: &PolicyFile) -> Result<Self, ModelError> {
        let mut probs = Vec::with_capacity(file.horizon * file.num_states * file.num_actions);
        if file.probs.len() != file.horizon {
            return Err(ModelError::Dimension(format!(
                "policy must list {} stages",
                file.horizon
            )));
        }
        for stage in &file.probs {
            if stage.len() != file.num_states {
                return Err(ModelError::Dimension(format!(
                    "policy stages must list {} states",
                    file.num_states
                )));
            }
            for row in stage {
                if row.len() != file.num_actions {
                    return Err(ModelError::Dimension(format!(
                        "policy rows must list {} actions",
                        file.num_actions
                    )));
                }
                probs.extend_from_slice(row);
            }
        }
        Self::new(file.horizon, file.num_states, file.num_actions, probs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file_format()).expect("policy serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: PolicyFile = serde_json::from_str(text)?;
        Self::from_file_format(&file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "S")]
    pub num_states: usize,
    #[serde(rename = "A")]
    pub num_actions: usize,
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// `V_h(s)` for `h` in `0..=H`; the terminal stage `H` is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    horizon: usize,
    num_states: usize,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(horizon: usize, num_states: usize) -> Self {
        Self {
            horizon,
            num_states,
            values: vec![0.0; (horizon + 1) * num_states],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Values at stage `h` (0-based; `h == H` is the terminal stage).
    pub fn stage(&self, h: usize) -> &[f64] {
        &self.values[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn stage_mut(&mut self, h: usize) -> &mut [f64] {
        assert!(h < self.horizon, "terminal stage is fixed at zero");
        &mut self.values[h * self.num_states..(h + 1) * self.num_states]
    }

    pub fn get(&self, h: usize, s: usize) -> f64 {
        self.values[h * self.num_states + s]
    }

    pub fn set(&mut self, h: usize, s: usize, value: f64) {
        self.stage_mut(h)[s] = value;
    }

    /// Nested `[h][s]` view, including the terminal stage.
    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..=self.horizon).map(|h| self.stage(h).to_vec()).collect()
    }
}

/// `Q_h(s,a)` for `h` in `0..H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            values: vec![0.0; horizon * num_states * num_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let start = (h * self.num_states + s) * self.num_actions;
        &self.values[start..start + self.num_actions]
    }

    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.row(h, s)[a]
    }

    pub fn set(&mut self, h: usize, s: usize, a: usize, value: f64) {
        self.values[(h * self.num_states + s) * self.num_actions + a] = value;
    }

    pub fn stage_values(&self, h: usize) -> &[f64] {
        let width = self.num_states * self.num_actions;
        &self.values[h * width..(h + 1) * width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.horizon)
            .map(|h| {
                (0..self.num_states)
                    .map(|s| self.row(h, s).to_vec())
                    .collect()
            })
            .collect()
    }
}

/// Smallest index attaining the maximum.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// Full total-variation dual, valid for any value function.
    TvDualFull,
    /// Dual with the minimum value taken to be zero.
    TvDualVanishing,
    /// Worst case over distributions with density ratio at most `1 / rho'`.
    BoundedRatio,
}

/// Which robust expectation to apply and with what parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustOperatorSpec {
    pub kind: OperatorKind,
    /// TV radius `rho` in `[0,1)` for the TV kinds, ratio parameter `rho'` in
    /// `(0,1]` for [`OperatorKind::BoundedRatio`].
    pub param: f64,
}

impl RobustOperatorSpec {
    pub fn tv_full(rho: f64) -> Self {
        Self {
            kind: OperatorKind::TvDualFull,
            param: rho,
        }
    }

    pub fn tv_vanishing(rho: f64) -> Self {
        Self {
            kind: OperatorKind::TvDualVanishing,
            param: rho,
        }
    }

    pub fn bounded_ratio(rho_prime: f64) -> Self {
        Self {
            kind: OperatorKind::BoundedRatio,
            param: rho_prime,
        }
    }

    /// The planner default: full TV dual at the instance radius.
    pub fn for_instance(instance: &RmdpInstance) -> Self {
        Self::tv_full(instance.rho())
    }

    pub fn is_valid(&self) -> bool {
        match self.kind {
            OperatorKind::TvDualFull | OperatorKind::TvDualVanishing => {
                (0.0..1.0).contains(&self.param)
            }
            OperatorKind::BoundedRatio => self.param > 0.0 && self.param <= 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(rho: f64) -> RmdpInstance {
        RmdpInstance::from_fn(
            2,
            2,
            2,
            rho,
            0,
            |_, s, a| {
                if (s + a) % 2 == 0 {
                    vec![0.3, 0.7]
                } else {
                    vec![1.0, 0.0]
                }
            },
            |_, s, _| if s == 0 { 1.0 } else { 0.25 },
        )
        .unwrap()
    }

    #[test]
    fn well_formed_instance_validates() {
        assert!(two_state(0.2).validate().is_ok());
    }

    #[test]
    fn short_row_is_reported_at_its_coordinates() {
        let base = two_state(0.2);
        let inst = RmdpInstance::from_fn(
            2,
            2,
            2,
            0.2,
            0,
            |h, s, a| {
                if (h, s, a) == (1, 0, 1) {
                    vec![0.4, 0.5]
                } else {
                    base.kernel_row(h, s, a).to_vec()
                }
            },
            |h, s, a| base.reward(h, s, a),
        )
        .unwrap();
        let report = inst.validate();
        assert_eq!(report.violations.len(), 1);
        match report.violations[0] {
            Violation::KernelRowSum { h, s, a, sum } => {
                assert_eq!((h, s, a), (1, 0, 1));
                assert!((sum - 0.9).abs() < 1e-12);
            }
            ref other => panic!("unexpected violation {other:?}"),
        }
        assert!(report.to_string().contains("(h=2, s=1, a=2)"));
    }

    #[test]
    fn reward_above_one_is_reported() {
        let inst =
            RmdpInstance::from_fn(1, 1, 1, 0.0, 0, |_, _, _| vec![1.0], |_, _, _| 1.5).unwrap();
        let report = inst.validate();
        assert!(
            matches!(report.violations[..], [Violation::RewardOutOfRange { value, .. }] if value == 1.5)
        );
        assert!(report.to_string().contains("reward out of [0,1]"));
    }

    #[test]
    fn bad_initial_state_and_radius_are_reported() {
        let inst = two_state(1.0).with_initial_state(5);
        let report = inst.validate();
        assert!(report
            .violations
            .contains(&Violation::RadiusOutOfRange { rho: 1.0 }));
        assert!(report
            .violations
            .iter()
            .any(|v| matches!(v, Violation::InitialStateOutOfRange { state: 5, .. })));
    }

    #[test]
    fn uniform_policy_rows() {
        for (actions, expected) in [(1usize, 1.0), (2, 0.5), (4, 0.25)] {
            let inst = RmdpInstance::from_fn(
                3,
                2,
                actions,
                0.0,
                0,
                |_, _, _| vec![0.5, 0.5],
                |_, _, _| 0.0,
            )
            .unwrap();
            let pi = PolicyTable::uniform(&inst);
            for h in 0..3 {
                for s in 0..2 {
                    assert!(pi.row(h, s).iter().all(|&p| p == expected));
                }
            }
            assert_eq!(pi.is_deterministic(), actions == 1);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let inst = two_state(0.3);
        let back = RmdpInstance::from_json(&inst.to_json()).unwrap();
        assert_eq!(inst, back);
        let text = inst.to_json();
        assert!(text.contains("\"initial_state\": 1"));
    }

    #[test]
    fn near_stochastic_rows_are_renormalized_on_load() {
        let mut file = two_state(0.0).to_file_format();
        file.kernel[0][0][0] = vec![0.3, 0.7 + 5e-13];
        let inst = RmdpInstance::from_file_format(&file).unwrap();
        let sum: f64 = inst.kernel_row(0, 0, 0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn malformed_dimensions_are_rejected() {
        let mut file = two_state(0.0).to_file_format();
        file.kernel[1][1].pop();
        assert!(matches!(
            RmdpInstance::from_file_format(&file),
            Err(ModelError::Dimension(_))
        ));
    }

    #[test]
    fn policy_rejects_non_stochastic_rows() {
        assert!(PolicyTable::new(1, 1, 2, vec![0.5, 0.6]).is_err());
        assert!(PolicyTable::new(1, 1, 2, vec![-0.5, 1.5]).is_err());
        let pi = PolicyTable::new(1, 2, 2, vec![0.25, 0.75, 0.0, 1.0]).unwrap();
        assert_eq!(pi.action(0, 1), Some(1));
        assert_eq!(pi.action(0, 0), None);
        assert!(!pi.is_deterministic());
        let back = PolicyTable::from_json(&pi.to_json()).unwrap();
        assert_eq!(pi, back);
    }

    #[test]
    fn argmax_breaks_ties_to_smallest_index() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax_first(&[0.0, 0.0]), 0);
    }
}
