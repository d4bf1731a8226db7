//! Instance generators and transformations: the two-action hard instance and
//! its multi-block concatenation, fail-state augmentation, seeded random
//! instances, and the discounted bounded-ratio model with its auxiliary
//! total-variation reduction.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use thiserror::Error;

use crate::model::{ModelError, PolicyTable, RmdpInstance};

pub const GOOD: usize = 0;
pub const BAD: usize = 1;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters of the two-state, two-action hard instance.
///
/// `rho` is the probability mass the adversary may relocate (half the L1
/// distance), so the generated instance carries operator radius `2 * rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardInstanceParams {
    /// Action (0 or 1) that reaches the good state with probability `p`.
    pub theta: usize,
    pub p: f64,
    pub q: f64,
    pub rho: f64,
    pub blocks: usize,
}

impl Default for HardInstanceParams {
    fn default() -> Self {
        Self {
            theta: 0,
            p: 0.8,
            q: 0.4,
            rho: 0.2,
            blocks: 1,
        }
    }
}

impl HardInstanceParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |msg: String| Err(EnvError::Params(msg));
        if self.theta > 1 {
            return fail(format!("theta must be 0 or 1, got {}", self.theta));
        }
        if !(0.0 < self.q && self.q < self.p && self.p < 1.0) {
            return fail(format!(
                "need 0 < q < p < 1, got p={}, q={}",
                self.p, self.q
            ));
        }
        if !(0.0..=self.q).contains(&self.rho) {
            return fail(format!(
                "need 0 <= rho <= q, got rho={}, q={}",
                self.rho, self.q
            ));
        }
        if self.rho >= 0.5 {
            return fail(format!(
                "relocated mass rho must be below 1/2, got {}",
                self.rho
            ));
        }
        if self.blocks == 0 {
            return fail("blocks must be positive".into());
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        3 * self.blocks
    }

    /// Radius stored on the generated instance (the L1 budget).
    pub fn operator_radius(&self) -> f64 {
        2.0 * self.rho
    }
}

/// Builds the hard instance. State 0 is the good state, state 1 the bad one.
///
/// Within each block of three steps the good state is absorbing and pays 1.
/// On the middle step the bad state moves to the good state with probability
/// `p` under action `theta` and `q` under the other action; on the last step it
/// is absorbing. From the second block on, the first step of a block pays 1 at
/// the bad state and sends it to the good state. The first step of the first
/// block is never taken from the bad state; its row copies the middle-step row.
pub fn make_hard_instance(params: &HardInstanceParams) -> Result<RmdpInstance, EnvError> {
    params.validate()?;
    let HardInstanceParams { theta, p, q, .. } = *params;
    let switching = move |a: usize| {
        let up = if a == theta { p } else { q };
        vec![up, 1.0 - up]
    };
    let inst = RmdpInstance::from_fn(
        params.horizon(),
        2,
        2,
        params.operator_radius(),
        GOOD,
        |h, s, a| match (s, h % 3, h / 3) {
            (GOOD, _, _) => vec![1.0, 0.0],
            (_, 0, 0) | (_, 1, _) => switching(a),
            (_, 0, _) => vec![1.0, 0.0],
            _ => vec![0.0, 1.0],
        },
        |h, s, _| match s {
            GOOD => 1.0,
            _ if h % 3 == 0 && h > 0 => 1.0,
            _ => 0.0,
        },
    )?;
    Ok(inst)
}

/// Appends an absorbing zero-reward state as the last state index.
pub fn augment_with_fail_state(instance: &RmdpInstance) -> RmdpInstance {
    let n = instance.num_states();
    RmdpInstance::from_fn(
        instance.horizon(),
        n + 1,
        instance.num_actions(),
        instance.rho(),
        instance.initial_state(),
        |h, s, a| {
            let mut row = vec![0.0; n + 1];
            if s == n {
                row[n] = 1.0;
            } else {
                row[..n].copy_from_slice(instance.kernel_row(h, s, a));
            }
            row
        },
        |h, s, a| {
            if s == n {
                0.0
            } else {
                instance.reward(h, s, a)
            }
        },
    )
    .expect("augmented shapes are consistent")
}

/// Extends a policy on the original states with an arbitrary (first-action)
/// choice at an appended fail state.
pub fn extend_policy_with_fail_state(policy: &PolicyTable) -> PolicyTable {
    let (hh, ns, na) = (policy.horizon(), policy.num_states(), policy.num_actions());
    let mut probs = Vec::with_capacity(hh * (ns + 1) * na);
    for h in 0..hh {
        for s in 0..ns {
            probs.extend_from_slice(policy.row(h, s));
        }
        probs.push(1.0);
        probs.extend(std::iter::repeat_n(0.0, na - 1));
    }
    PolicyTable::new(hh, ns + 1, na, probs).expect("rows copied from a valid policy")
}

/// Settings for seeded random instances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInstanceConfig {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub rho: f64,
    /// Append a fail state after sampling.
    pub fail_state: bool,
    /// Probability that a kernel entry is zeroed (each row keeps one entry).
    pub sparsity: f64,
}

impl RandomInstanceConfig {
    pub fn new(num_states: usize, num_actions: usize, horizon: usize, rho: f64) -> Self {
        Self {
            num_states,
            num_actions,
            horizon,
            rho,
            fail_state: false,
            sparsity: 0.0,
        }
    }

    pub fn with_fail_state(mut self, fail_state: bool) -> Self {
        self.fail_state = fail_state;
        self
    }

    pub fn with_sparsity(mut self, sparsity: f64) -> Self {
        self.sparsity = sparsity;
        self
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.num_states == 0 || self.num_actions == 0 || self.horizon == 0 {
            return Err(EnvError::Params("S, A, H must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(EnvError::Params(format!(
                "rho must lie in [0, 1), got {}",
                self.rho
            )));
        }
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(EnvError::Params(format!(
                "sparsity must lie in [0, 1), got {}",
                self.sparsity
            )));
        }
        Ok(())
    }

    /// Dirichlet(1) kernel rows and uniform rewards from a ChaCha8 stream.
    pub fn generate(&self, seed: u64) -> Result<RmdpInstance, EnvError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.num_states;
        let sparsity = self.sparsity;
        let mut rows = Vec::with_capacity(self.horizon * n * self.num_actions);
        let mut rewards = Vec::with_capacity(self.horizon * n * self.num_actions);
        for _ in 0..self.horizon * n * self.num_actions {
            rows.push(dirichlet_row(&mut rng, n, sparsity));
            rewards.push(rng.random::<f64>());
        }
        let na = self.num_actions;
        let index = move |h: usize, s: usize, a: usize| (h * n + s) * na + a;
        let inst = RmdpInstance::from_fn(
            self.horizon,
            n,
            self.num_actions,
            self.rho,
            0,
            |h, s, a| rows[index(h, s, a)].clone(),
            |h, s, a| rewards[index(h, s, a)],
        )?;
        Ok(if self.fail_state {
            augment_with_fail_state(&inst)
        } else {
            inst
        })
    }
}

fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize, sparsity: f64) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    if sparsity > 0.0 {
        let keep = rng.random_range(0..n);
        for (i, x) in row.iter_mut().enumerate() {
            if i != keep && rng.random::<f64>() < sparsity {
                *x = 0.0;
            }
        }
    }
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    } else {
        row = vec![1.0 / n as f64; n];
    }
    row
}

/// Seeded random instance; with `require_vanishing_min` a fail state is appended.
pub fn make_random_instance(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    rho: f64,
    require_vanishing_min: bool,
) -> Result<RmdpInstance, EnvError> {
    RandomInstanceConfig::new(num_states, num_actions, horizon, rho)
        .with_fail_state(require_vanishing_min)
        .generate(seed)
}

/// A finite-horizon model whose stage-`h` rewards are discounted by
/// `gamma^(h-1)` and whose robust sets are bounded-ratio sets `q <= p / rho_prime`.
#[derive(Debug, Clone)]
pub struct DiscountedInstance {
    /// Undiscounted rewards and nominal kernel; the base radius is ignored.
    pub base: RmdpInstance,
    pub gamma: f64,
    pub rho_prime: f64,
}

impl DiscountedInstance {
    pub fn new(base: RmdpInstance, gamma: f64, rho_prime: f64) -> Result<Self, EnvError> {
        let d = Self {
            base,
            gamma,
            rho_prime,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.rho_prime > 0.5 && self.rho_prime <= 1.0) {
            return Err(EnvError::Params(format!(
                "rho' must lie in (1/2, 1], got {}",
                self.rho_prime
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(EnvError::Params(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if self.gamma > self.rho_prime {
            return Err(EnvError::Params(format!(
                "gamma = {} exceeds rho' = {}; auxiliary rewards would exceed 1",
                self.gamma, self.rho_prime
            )));
        }
        Ok(())
    }

    /// The base model with rewards `gamma^(h-1) R_h` (radius set to zero; plan
    /// it with the bounded-ratio operator at `rho_prime`).
    pub fn discounted_model(&self) -> RmdpInstance {
        scaled_rewards(&self.base, self.gamma, 0.0)
    }
}

fn scaled_rewards(base: &RmdpInstance, factor: f64, rho: f64) -> RmdpInstance {
    RmdpInstance::from_fn(
        base.horizon(),
        base.num_states(),
        base.num_actions(),
        rho,
        base.initial_state(),
        |h, s, a| base.kernel_row(h, s, a).to_vec(),
        |h, s, a| factor.powi(h as i32) * base.reward(h, s, a),
    )
    .expect("shapes copied from a valid instance")
}

/// Auxiliary total-variation instance: a fail state is appended, stage-`h`
/// rewards become `(gamma / rho')^(h-1) R_h`, and the radius is `2 - 2 rho'`.
pub fn to_auxiliary_tv(d: &DiscountedInstance) -> Result<RmdpInstance, EnvError> {
    d.validate()?;
    let ratio = d.gamma / d.rho_prime;
    let radius = 2.0 - 2.0 * d.rho_prime;
    Ok(augment_with_fail_state(&scaled_rewards(
        &d.base, ratio, radius,
    )))
}

/// Random discounted instance over `num_states` states.
pub fn make_random_discounted(
    seed: u64,
    num_states: usize,
    num_actions: usize,
    horizon: usize,
    gamma: f64,
    rho_prime: f64,
) -> Result<DiscountedInstance, EnvError> {
    let base = RandomInstanceConfig::new(num_states, num_actions, horizon, 0.0).generate(seed)?;
    DiscountedInstance::new(base, gamma, rho_prime)
}

/// `reachable[h][s]`: state `s` can be occupied at the start of stage `h`
/// (0-based, `h = 0..=H`) under the nominal kernel and some action sequence.
pub fn reachable_states(instance: &RmdpInstance) -> Vec<Vec<bool>> {
    let ns = instance.num_states();
    let mut out = Vec::with_capacity(instance.horizon() + 1);
    let mut current = vec![false; ns];
    current[instance.initial_state()] = true;
    for h in 0..instance.horizon() {
        let mut next = vec![false; ns];
        for s in (0..ns).filter(|&s| current[s]) {
            for a in 0..instance.num_actions() {
                for (t, &pr) in instance.kernel_row(h, s, a).iter().enumerate() {
                    if pr > 0.0 {
                        next[t] = true;
                    }
                }
            }
        }
        out.push(current);
        current = next;
    }
    out.push(current);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(row: &[f64], expected: &[f64]) -> bool {
        row.len() == expected.len() && row.iter().zip(expected).all(|(x, y)| (x - y).abs() < 1e-15)
    }

    #[test]
    fn hard_instance_shape_and_validity() {
        let inst = make_hard_instance(&HardInstanceParams::default()).unwrap();
        assert_eq!(
            (inst.horizon(), inst.num_states(), inst.num_actions()),
            (3, 2, 2)
        );
        assert!((inst.rho() - 0.4).abs() < 1e-15);
        assert_eq!(inst.initial_state(), GOOD);
        assert!(inst.validate().is_ok());
        assert!(close(inst.kernel_row(1, BAD, 0), &[0.8, 0.2]));
        assert!(close(inst.kernel_row(1, BAD, 1), &[0.4, 0.6]));
        assert_eq!(inst.kernel_row(0, BAD, 1), inst.kernel_row(1, BAD, 1));
    }

    #[test]
    fn thetas_differ_only_at_the_switching_rows() {
        let a = make_hard_instance(&HardInstanceParams::default()).unwrap();
        let b = make_hard_instance(&HardInstanceParams {
            theta: 1,
            ..Default::default()
        })
        .unwrap();
        for h in 0..3 {
            for s in 0..2 {
                for act in 0..2 {
                    assert_eq!(a.reward(h, s, act), b.reward(h, s, act));
                    let same = a.kernel_row(h, s, act) == b.kernel_row(h, s, act);
                    assert_eq!(same, s == GOOD || h == 2, "h={h} s={s} a={act}");
                }
            }
        }
        assert_eq!(a.kernel_row(1, BAD, 0), b.kernel_row(1, BAD, 1));
    }

    #[test]
    fn two_blocks_reset_at_step_four() {
        let inst = make_hard_instance(&HardInstanceParams {
            blocks: 2,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(inst.horizon(), 6);
        for a in 0..2 {
            assert_eq!(inst.reward(3, BAD, a), 1.0);
            assert_eq!(inst.kernel_row(3, BAD, a), &[1.0, 0.0]);
            assert_eq!(inst.reward(0, BAD, a), 0.0);
        }
        assert!(close(inst.kernel_row(4, BAD, 0), &[0.8, 0.2]));
    }

    #[test]
    fn hard_params_are_checked() {
        let bad = [
            HardInstanceParams {
                p: 0.3,
                ..Default::default()
            },
            HardInstanceParams {
                rho: 0.5,
                ..Default::default()
            },
            HardInstanceParams {
                theta: 2,
                ..Default::default()
            },
            HardInstanceParams {
                blocks: 0,
                ..Default::default()
            },
            HardInstanceParams {
                p: 0.9,
                q: 0.6,
                rho: 0.55,
                ..Default::default()
            },
        ];
        for params in bad {
            assert!(make_hard_instance(&params).is_err(), "{params:?}");
        }
    }

    #[test]
    fn bad_state_is_never_reached_nominally() {
        let inst = make_hard_instance(&HardInstanceParams {
            blocks: 3,
            ..Default::default()
        })
        .unwrap();
        for stage in reachable_states(&inst) {
            assert_eq!(stage, vec![true, false]);
        }
    }

    #[test]
    fn fail_state_is_absorbing_and_unrewarded() {
        let inst = make_random_instance(3, 3, 2, 4, 0.2, false).unwrap();
        let aug = augment_with_fail_state(&inst);
        assert_eq!(aug.num_states(), 4);
        for h in 0..4 {
            for a in 0..2 {
                assert_eq!(aug.kernel_row(h, 3, a), &[0.0, 0.0, 0.0, 1.0]);
                assert_eq!(aug.reward(h, 3, a), 0.0);
                for s in 0..3 {
                    assert_eq!(&aug.kernel_row(h, s, a)[..3], inst.kernel_row(h, s, a));
                    assert_eq!(aug.kernel_row(h, s, a)[3], 0.0);
                }
            }
        }
    }

    #[test]
    fn random_instances_are_reproducible_and_valid() {
        let a = make_random_instance(11, 4, 3, 5, 0.3, true).unwrap();
        let b = make_random_instance(11, 4, 3, 5, 0.3, true).unwrap();
        let c = make_random_instance(12, 4, 3, 5, 0.3, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.validate().is_ok());
        assert_eq!(a.num_states(), 5);
    }

    #[test]
    fn sparse_rows_stay_stochastic() {
        let inst = RandomInstanceConfig::new(6, 2, 3, 0.1)
            .with_sparsity(0.8)
            .generate(5)
            .unwrap();
        assert!(inst.validate().is_ok());
        let zeros = (0..3)
            .flat_map(|h| (0..6).flat_map(move |s| (0..2).map(move |a| (h, s, a))))
            .map(|(h, s, a)| {
                inst.kernel_row(h, s, a)
                    .iter()
                    .filter(|&&x| x == 0.0)
                    .count()
            })
            .sum::<usize>();
        assert!(zeros > 0);
    }

    #[test]
    fn auxiliary_model_at_the_boundary() {
        let base = make_random_instance(2, 3, 2, 4, 0.0, false).unwrap();
        let d = DiscountedInstance::new(base.clone(), 1.0, 1.0).unwrap();
        let aux = to_auxiliary_tv(&d).unwrap();
        assert_eq!(aux.rho(), 0.0);
        assert_eq!(aux.num_states(), 4);
        for h in 0..4 {
            for s in 0..3 {
                assert_eq!(aux.reward(h, s, 1), base.reward(h, s, 1));
            }
        }
        assert!(reachable_states(&aux).iter().all(|stage| !stage[3]));
    }

    #[test]
    fn equal_discount_and_ratio_keep_rewards() {
        let base = make_random_instance(4, 2, 2, 3, 0.0, false).unwrap();
        let aux =
            to_auxiliary_tv(&DiscountedInstance::new(base.clone(), 0.7, 0.7).unwrap()).unwrap();
        assert!((aux.rho() - 0.6).abs() < 1e-15);
        for h in 0..3 {
            assert_eq!(aux.reward(h, 1, 0), base.reward(h, 1, 0));
        }
    }

    #[test]
    fn discount_above_ratio_is_rejected() {
        let base = make_random_instance(4, 2, 2, 3, 0.0, false).unwrap();
        assert!(DiscountedInstance::new(base.clone(), 0.9, 0.8).is_err());
        assert!(DiscountedInstance::new(base, 0.4, 0.5).is_err());
    }

    #[test]
    fn extended_policy_picks_first_action_at_fail_state() {
        let pol = PolicyTable::deterministic(2, 2, 3, &[2, 1, 0, 2]).unwrap();
        let ext = extend_policy_with_fail_state(&pol);
        assert_eq!(ext.num_states(), 3);
        assert_eq!(ext.action(0, 0), Some(2));
        assert_eq!(ext.action(1, 1), Some(2));
        assert_eq!(ext.action(1, 2), Some(0));
    }
}
