//! Optimistic robust value iteration for total-variation robust sets, learned
//! from episodes sampled in the nominal environment.
//!
//! Each episode: plan optimistic and pessimistic robust values on the
//! empirical kernel with Bernstein-style bonuses, act greedily with respect to
//! the optimistic values, then add the observed transitions to the counts.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bellman::{self, OperatorError};
use crate::model::{argmax_first, ModelError, PolicyTable, QTable, RmdpInstance, ValueTable};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid learner configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("operator failed at stage {stage}, state {state}, action {action}: {source}")]
    Operator {
        stage: usize,
        state: usize,
        action: usize,
        #[source]
        source: OperatorError,
    },
}

/// Bonus constants and the planned episode budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BonusConfig {
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    /// Planned number of episodes `K`; enters the log term and `1/sqrt(K)`.
    pub episodes: usize,
    /// Multiplier applied to the whole bonus.
    pub bonus_scale: f64,
}

impl Default for BonusConfig {
    fn default() -> Self {
        Self {
            c1: 2.0,
            c2: 1.0,
            delta: 0.01,
            episodes: 1,
            bonus_scale: 1.0,
        }
    }
}

impl BonusConfig {
    pub fn with_episodes(mut self, episodes: usize) -> Self {
        self.episodes = episodes;
        self
    }

    pub fn with_bonus_scale(mut self, bonus_scale: f64) -> Self {
        self.bonus_scale = bonus_scale;
        self
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let err = |m: String| Err(LearnerError::Config(m));
        if !(self.c1 > 0.0 && self.c1.is_finite()) || !(self.c2 > 0.0 && self.c2.is_finite()) {
            return err(format!(
                "c1 and c2 must be positive, got c1={}, c2={}",
                self.c1, self.c2
            ));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return err(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.episodes == 0 {
            return err("the episode budget K must be at least 1".into());
        }
        if !(self.bonus_scale >= 0.0 && self.bonus_scale.is_finite()) {
            return err(format!(
                "bonus_scale must be finite and nonnegative, got {}",
                self.bonus_scale
            ));
        }
        Ok(())
    }

    /// `ln(S^3 A H^2 K^(3/2) / delta)`.
    pub fn log_term(&self, num_states: usize, num_actions: usize, horizon: usize) -> f64 {
        let (s, a, h, k) = (
            num_states as f64,
            num_actions as f64,
            horizon as f64,
            self.episodes as f64,
        );
        3.0 * s.ln() + a.ln() + 2.0 * h.ln() + 1.5 * k.ln() - self.delta.ln()
    }
}

/// Truncation level `min{H, 1/m}` for an instance with L1 budget `rho`, where
/// `m = rho / 2` is the relocated mass; `H` at radius zero.
pub fn value_cap(horizon: usize, rho: f64) -> f64 {
    let h = horizon as f64;
    if rho > 0.0 {
        h.min(2.0 / rho)
    } else {
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub stage: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

pub type Trajectory = Vec<Transition>;

/// Counts, empirical kernel, value bounds and greedy policy of one run.
#[derive(Debug, Clone)]
pub struct LearnerState {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    rho: f64,
    config: BonusConfig,
    log_term: f64,
    transitions: Vec<u64>,
    visits: Vec<u64>,
    p_hat: Vec<f64>,
    q_upper: QTable,
    q_lower: QTable,
    v_upper: ValueTable,
    v_lower: ValueTable,
    actions: Vec<usize>,
    episode: usize,
}

impl LearnerState {
    pub fn new(instance: &RmdpInstance, config: BonusConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        let report = instance.validate();
        if !report.is_ok() {
            return Err(ModelError::Invalid(report).into());
        }
        let (hh, ns, na) = (
            instance.horizon(),
            instance.num_states(),
            instance.num_actions(),
        );
        Ok(Self {
            horizon: hh,
            num_states: ns,
            num_actions: na,
            rho: instance.rho(),
            config,
            log_term: config.log_term(ns, na, hh),
            transitions: vec![0; hh * ns * na * ns],
            visits: vec![0; hh * ns * na],
            p_hat: vec![0.0; hh * ns * na * ns],
            q_upper: QTable::zeros(hh, ns, na),
            q_lower: QTable::zeros(hh, ns, na),
            v_upper: ValueTable::zeros(hh, ns),
            v_lower: ValueTable::zeros(hh, ns),
            actions: vec![0; hh * ns],
            episode: 0,
        })
    }

    fn sa(&self, h: usize, s: usize, a: usize) -> usize {
        (h * self.num_states + s) * self.num_actions + a
    }

    pub fn config(&self) -> &BonusConfig {
        &self.config
    }

    pub fn log_term(&self) -> f64 {
        self.log_term
    }

    /// Number of completed planning passes.
    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn visits(&self, h: usize, s: usize, a: usize) -> u64 {
        self.visits[self.sa(h, s, a)]
    }

    pub fn transition_count(&self, h: usize, s: usize, a: usize, next: usize) -> u64 {
        self.transitions[self.sa(h, s, a) * self.num_states + next]
    }

    pub fn empirical_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = self.sa(h, s, a) * self.num_states;
        &self.p_hat[start..start + self.num_states]
    }

    pub fn q_upper(&self) -> &QTable {
        &self.q_upper
    }

    pub fn q_lower(&self) -> &QTable {
        &self.q_lower
    }

    pub fn v_upper(&self) -> &ValueTable {
        &self.v_upper
    }

    pub fn v_lower(&self) -> &ValueTable {
        &self.v_lower
    }

    /// Greedy actions indexed `[h * S + s]`.
    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn policy(&self) -> PolicyTable {
        PolicyTable::deterministic(
            self.horizon,
            self.num_states,
            self.num_actions,
            &self.actions,
        )
        .expect("greedy actions are in range")
    }

    /// Adds one observed transition and refreshes the affected empirical row.
    pub fn record_transition(&mut self, h: usize, s: usize, a: usize, next: usize) {
        let idx = self.sa(h, s, a);
        let n = self.num_states;
        self.visits[idx] += 1;
        self.transitions[idx * n + next] += 1;
        let total = self.visits[idx] as f64;
        for t in 0..n {
            self.p_hat[idx * n + t] = self.transitions[idx * n + t] as f64 / total;
        }
    }

    /// Bernstein-style bonus at `(h, s, a)` from the stage-`h+1` value bounds.
    pub fn compute_bonus(&self, h: usize, s: usize, a: usize) -> f64 {
        let p = self.empirical_row(h, s, a);
        let upper = self.v_upper.stage(h + 1);
        let lower = self.v_lower.stage(h + 1);
        let n = (self.visits(h, s, a) as f64).max(1.0);
        let mid = |t: usize| 0.5 * (upper[t] + lower[t]);
        let mean: f64 = (0..self.num_states).map(|t| p[t] * mid(t)).sum();
        let variance: f64 = (0..self.num_states)
            .map(|t| p[t] * (mid(t) - mean).powi(2))
            .sum();
        let width: f64 = (0..self.num_states)
            .map(|t| p[t] * (upper[t] - lower[t]))
            .sum();
        let (hh, ns) = (self.horizon as f64, self.num_states as f64);
        let c = &self.config;
        let bonus = (variance.max(0.0) * c.c1 * self.log_term / n).sqrt()
            + 2.0 / hh * width
            + c.c2 * hh * hh * ns * self.log_term / n
            + 1.0 / (c.episodes as f64).sqrt();
        c.bonus_scale * bonus
    }

    /// Backward pass producing the optimistic and pessimistic tables and the
    /// greedy policy for the next episode.
    pub fn optimistic_robust_planning(
        &mut self,
        instance: &RmdpInstance,
    ) -> Result<(), LearnerError> {
        let cap = value_cap(self.horizon, self.rho);
        let horizon = self.horizon as f64;
        for h in (0..self.horizon).rev() {
            for s in 0..self.num_states {
                for a in 0..self.num_actions {
                    let bonus = self.compute_bonus(h, s, a);
                    let p = self.empirical_row(h, s, a);
                    let at = |source| LearnerError::Operator {
                        stage: h + 1,
                        state: s + 1,
                        action: a + 1,
                        source,
                    };
                    let up =
                        bellman::tv_dual_vanishing(self.v_upper.stage(h + 1), p, self.rho, horizon)
                            .map_err(at)?
                            .value;
                    let lo =
                        bellman::tv_dual_vanishing(self.v_lower.stage(h + 1), p, self.rho, horizon)
                            .map_err(at)?
                            .value;
                    let r = instance.reward(h, s, a);
                    self.q_upper.set(h, s, a, (r + up + bonus).min(cap));
                    self.q_lower.set(h, s, a, (r + lo - bonus).max(0.0));
                }
                let best = argmax_first(self.q_upper.row(h, s));
                self.actions[h * self.num_states + s] = best;
                self.v_upper.set(h, s, self.q_upper.get(h, s, best));
                self.v_lower.set(h, s, self.q_lower.get(h, s, best));
            }
        }
        self.episode += 1;
        Ok(())
    }

    /// Rolls out the current greedy policy in the nominal environment and
    /// records every transition.
    pub fn run_episode<R: Rng>(&mut self, instance: &RmdpInstance, rng: &mut R) -> Trajectory {
        let mut trajectory = Vec::with_capacity(self.horizon);
        let mut s = instance.initial_state();
        for h in 0..self.horizon {
            let a = self.actions[h * self.num_states + s];
            let next = sample_index(instance.kernel_row(h, s, a), rng);
            self.record_transition(h, s, a, next);
            trajectory.push(Transition {
                stage: h,
                state: s,
                action: a,
                reward: instance.reward(h, s, a),
                next_state: next,
            });
            s = next;
        }
        trajectory
    }
}

/// Inverse-CDF draw; rounding slack falls on the last positive entry.
fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// What the learner did in one episode.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    /// 1-based episode index.
    pub episode: usize,
    /// Executed greedy actions, `[h * S + s]`.
    pub actions: Vec<usize>,
    /// Optimistic stage-1 value at the initial state.
    pub upper_value: f64,
    /// Pessimistic stage-1 value at the initial state.
    pub lower_value: f64,
    pub trajectory: Trajectory,
}

/// Stepwise driver: one call to [`OptimisticLearner::next_episode`] plans, acts and learns.
pub struct OptimisticLearner<'a> {
    instance: &'a RmdpInstance,
    state: LearnerState,
    rng: ChaCha8Rng,
}

impl<'a> OptimisticLearner<'a> {
    pub fn new(
        instance: &'a RmdpInstance,
        config: BonusConfig,
        seed: u64,
    ) -> Result<Self, LearnerError> {
        Ok(Self {
            instance,
            state: LearnerState::new(instance, config)?,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> &LearnerState {
        &self.state
    }

    pub fn next_episode(&mut self) -> Result<EpisodeRecord, LearnerError> {
        self.state.optimistic_robust_planning(self.instance)?;
        let s1 = self.instance.initial_state();
        let upper_value = self.state.v_upper.get(0, s1);
        let lower_value = self.state.v_lower.get(0, s1);
        let actions = self.state.actions.clone();
        let trajectory = self.state.run_episode(self.instance, &mut self.rng);
        Ok(EpisodeRecord {
            episode: self.state.episode,
            actions,
            upper_value,
            lower_value,
            trajectory,
        })
    }

    /// Index (0-based) of the uniformly drawn output policy among `episodes`.
    pub fn draw_output(&mut self, episodes: usize) -> usize {
        self.rng.random_range(0..episodes)
    }
}

#[derive(Debug, Clone)]
pub struct LearnerRun {
    pub history: Vec<EpisodeRecord>,
    /// 0-based index into `history` of the returned policy.
    pub output_index: usize,
    pub output_policy: PolicyTable,
}

impl LearnerRun {
    pub fn policy(&self, index: usize, instance: &RmdpInstance) -> PolicyTable {
        PolicyTable::deterministic(
            instance.horizon(),
            instance.num_states(),
            instance.num_actions(),
            &self.history[index].actions,
        )
        .expect("greedy actions are in range")
    }
}

/// Runs `config.episodes` episodes and returns a uniformly drawn executed policy.
pub fn run(
    instance: &RmdpInstance,
    config: BonusConfig,
    seed: u64,
) -> Result<LearnerRun, LearnerError> {
    let mut learner = OptimisticLearner::new(instance, config, seed)?;
    let mut history = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        history.push(learner.next_episode()?);
    }
    let output_index = learner.draw_output(history.len());
    let output_policy = PolicyTable::deterministic(
        instance.horizon(),
        instance.num_states(),
        instance.num_actions(),
        &history[output_index].actions,
    )
    .expect("greedy actions are in range");
    Ok(LearnerRun {
        history,
        output_index,
        output_policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::{make_hard_instance, make_random_instance, HardInstanceParams, BAD};

    fn chain() -> RmdpInstance {
        RmdpInstance::from_fn(
            3,
            3,
            2,
            0.0,
            0,
            |_, s, a| {
                let mut row = vec![0.0; 3];
                row[(s + a + 1) % 3] = 1.0;
                row
            },
            |_, s, a| if s == 2 && a == 1 { 1.0 } else { 0.25 },
        )
        .unwrap()
    }

    #[test]
    fn log_term_matches_direct_formula() {
        let c = BonusConfig {
            delta: 0.1,
            episodes: 100,
            ..Default::default()
        };
        let direct = (8.0 * 1.0 * 4.0 * 1000.0f64 / 0.1).ln();
        assert!((c.log_term(2, 1, 2) - direct).abs() < 1e-12);
    }

    #[test]
    fn bonus_with_no_data_keeps_constant_terms() {
        let inst = make_random_instance(1, 3, 2, 4, 0.3, false).unwrap();
        let cfg = BonusConfig::default().with_episodes(64);
        let st = LearnerState::new(&inst, cfg).unwrap();
        let iota = cfg.log_term(3, 2, 4);
        let expected = 16.0 * 3.0 * iota + 1.0 / 8.0;
        assert!((st.compute_bonus(1, 2, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn bonus_hand_example() {
        let inst = RmdpInstance::from_fn(2, 2, 1, 0.0, 0, |_, _, _| vec![0.5, 0.5], |_, _, _| 0.0)
            .unwrap();
        let cfg = BonusConfig {
            c1: 1.0,
            c2: 1.0,
            delta: 0.1,
            episodes: 100,
            bonus_scale: 1.0,
        };
        let mut st = LearnerState::new(&inst, cfg).unwrap();
        for next in [0, 1, 0, 1] {
            st.record_transition(0, 0, 0, next);
        }
        st.v_upper.set(1, 1, 1.0);
        st.v_lower.set(1, 1, 1.0);
        let iota = 320000.0f64.ln();
        // Variance of (0, 1) under (1/2, 1/2) is 1/4; H^2 S = 8.
        let expected = (0.25 * iota / 4.0).sqrt() + 8.0 * iota / 4.0 + 0.1;
        assert!((st.compute_bonus(0, 0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn bonus_shrinks_to_the_budget_term() {
        let inst = RmdpInstance::from_fn(2, 2, 1, 0.0, 0, |_, _, _| vec![0.5, 0.5], |_, _, _| 0.0)
            .unwrap();
        let cfg = BonusConfig::default().with_episodes(400);
        let mut st = LearnerState::new(&inst, cfg).unwrap();
        for i in 0..2_000_000u64 {
            st.record_transition(0, 0, 0, (i % 2) as usize);
        }
        let b = st.compute_bonus(0, 0, 0);
        assert!(b > 0.05 && b < 0.05 + 0.01, "{b}");
    }

    #[test]
    fn first_pass_saturates() {
        let inst = make_random_instance(2, 3, 2, 4, 0.3, true).unwrap();
        let mut st = LearnerState::new(&inst, BonusConfig::default().with_episodes(10)).unwrap();
        st.optimistic_robust_planning(&inst).unwrap();
        let cap = value_cap(4, 0.3);
        for x in st.q_upper().to_nested().into_iter().flatten().flatten() {
            assert_eq!(x, cap);
        }
        for x in st.q_lower().to_nested().into_iter().flatten().flatten() {
            assert_eq!(x, 0.0);
        }
        assert!(st.actions().iter().all(|&a| a == 0));
    }

    #[test]
    fn exact_model_without_bonus_recovers_standard_values() {
        let inst = RmdpInstance::from_fn(
            3,
            3,
            2,
            0.0,
            0,
            |_, s, a| {
                if (s + a) % 2 == 0 {
                    vec![0.5, 0.25, 0.25]
                } else {
                    vec![0.0, 0.75, 0.25]
                }
            },
            |h, s, a| ((h + 2 * s + a) % 5) as f64 / 4.0,
        )
        .unwrap();
        let mut st =
            LearnerState::new(&inst, BonusConfig::default().with_bonus_scale(0.0)).unwrap();
        for h in 0..3 {
            for s in 0..3 {
                for a in 0..2 {
                    let row = inst.kernel_row(h, s, a);
                    for (t, &p) in row.iter().enumerate() {
                        for _ in 0..(p * 4.0).round() as usize {
                            st.record_transition(h, s, a, t);
                        }
                    }
                }
            }
        }
        st.optimistic_robust_planning(&inst).unwrap();
        // Independent backward induction.
        let mut v = [[0.0f64; 3]; 4];
        for h in (0..3).rev() {
            for s in 0..3 {
                v[h][s] = (0..2)
                    .map(|a| {
                        let ev: f64 = inst
                            .kernel_row(h, s, a)
                            .iter()
                            .zip(&v[h + 1])
                            .map(|(p, x)| p * x)
                            .sum();
                        inst.reward(h, s, a) + ev
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
        for h in 0..3 {
            for s in 0..3 {
                assert!((st.v_upper().get(h, s) - v[h][s]).abs() < 1e-12);
                assert!((st.v_lower().get(h, s) - v[h][s]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_kernel_gives_unique_path() {
        let inst = chain();
        let mut st = LearnerState::new(&inst, BonusConfig::default()).unwrap();
        st.optimistic_robust_planning(&inst).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let traj = st.run_episode(&inst, &mut rng);
        let states: Vec<usize> = traj.iter().map(|t| t.state).collect();
        assert_eq!(states, vec![0, 1, 2]);
        assert_eq!(traj[2].next_state, 0);
        assert_eq!(traj[0].reward, 0.25);
    }

    #[test]
    fn hard_instance_never_visits_bad_state() {
        let inst = make_hard_instance(&HardInstanceParams::default()).unwrap();
        let out = run(&inst, BonusConfig::default().with_episodes(200), 4).unwrap();
        assert!(out
            .history
            .iter()
            .flat_map(|e| &e.trajectory)
            .all(|t| t.state != BAD && t.next_state != BAD));
        let mut st = LearnerState::new(&inst, BonusConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            st.optimistic_robust_planning(&inst).unwrap();
            st.run_episode(&inst, &mut rng);
        }
        for h in 0..3 {
            for a in 0..2 {
                assert_eq!(st.visits(h, BAD, a), 0);
            }
        }
    }

    #[test]
    fn counts_are_conserved() {
        let inst = make_random_instance(8, 4, 2, 5, 0.3, true).unwrap();
        let mut st = LearnerState::new(&inst, BonusConfig::default().with_episodes(30)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..=30u64 {
            st.optimistic_robust_planning(&inst).unwrap();
            st.run_episode(&inst, &mut rng);
            for h in 0..5 {
                let mut total = 0;
                for s in 0..5 {
                    for a in 0..2 {
                        let row: u64 = (0..5).map(|t| st.transition_count(h, s, a, t)).sum();
                        assert_eq!(row, st.visits(h, s, a));
                        total += row;
                    }
                }
                assert_eq!(total, k);
            }
        }
    }

    #[test]
    fn equal_seeds_reproduce_runs() {
        let inst = make_random_instance(3, 3, 2, 4, 0.2, true).unwrap();
        let cfg = BonusConfig::default()
            .with_episodes(50)
            .with_bonus_scale(0.05);
        let a = run(&inst, cfg, 17).unwrap();
        let b = run(&inst, cfg, 17).unwrap();
        assert_eq!(a.output_index, b.output_index);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.trajectory, y.trajectory);
            assert_eq!(x.actions, y.actions);
            assert_eq!(x.upper_value.to_bits(), y.upper_value.to_bits());
        }
    }

    #[test]
    fn single_episode_outputs_first_policy() {
        let inst = chain();
        let out = run(&inst, BonusConfig::default(), 3).unwrap();
        assert_eq!(out.output_index, 0);
        assert_eq!(out.output_policy, out.policy(0, &inst));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let inst = chain();
        for cfg in [
            BonusConfig {
                c1: 0.0,
                ..Default::default()
            },
            BonusConfig {
                delta: 1.0,
                ..Default::default()
            },
            BonusConfig {
                episodes: 0,
                ..Default::default()
            },
            BonusConfig {
                bonus_scale: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                LearnerState::new(&inst, cfg),
                Err(LearnerError::Config(_))
            ));
        }
    }
}
