//! Regret, hardness and radius-sweep experiments. Every policy value is an
//! exact robust evaluation; no rollouts are used for measurement.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::environments::{
    augment_with_fail_state, make_hard_instance, EnvError, HardInstanceParams, RandomInstanceConfig,
};
use crate::learner::{value_cap, BonusConfig, LearnerError, OptimisticLearner};
use crate::model::{ModelError, PolicyTable, RmdpInstance, RobustOperatorSpec};
use crate::planning::{
    check_vanishing_minimal_value, robust_policy_evaluation, robust_value_iteration, PlanningError,
};

/// Slack allowed on the sandwich and on negative instantaneous regret.
pub const VALUE_SLACK: f64 = 1e-9;

/// Dyadic checkpoints used for the log-log slope fit.
pub const SLOPE_CHECKPOINTS: std::ops::RangeInclusive<u32> = 10..=15;

/// Name of the variable capping the worker pool.
pub const WORKERS_ENV: &str = "ROBUSTRL_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Planning(#[from] PlanningError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True for bad input (configuration, instance or parameter files).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Json(_)
                | HarnessError::Env(EnvError::Params(_))
                | HarnessError::Learner(LearnerError::Config(_))
                | HarnessError::Model(
                    ModelError::Invalid(_) | ModelError::Dimension(_) | ModelError::Json(_)
                )
                | HarnessError::Env(EnvError::Model(
                    ModelError::Invalid(_) | ModelError::Dimension(_)
                ))
                | HarnessError::Learner(LearnerError::Model(ModelError::Invalid(_)))
        )
    }
}

/// Where an experiment's instance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InstanceSource {
    File {
        path: PathBuf,
    },
    Random {
        seed: u64,
        num_states: usize,
        num_actions: usize,
        horizon: usize,
        rho: f64,
        #[serde(default)]
        fail_state: bool,
        #[serde(default)]
        sparsity: f64,
    },
    /// `rho` is the relocated probability mass.
    Hard {
        theta: usize,
        p: f64,
        q: f64,
        rho: f64,
        #[serde(default = "one")]
        blocks: usize,
    },
}

fn one() -> usize {
    1
}

impl InstanceSource {
    pub fn resolve(&self) -> Result<RmdpInstance, HarnessError> {
        let inst = match self {
            InstanceSource::File { path } => RmdpInstance::load(path)?,
            InstanceSource::Random {
                seed,
                num_states,
                num_actions,
                horizon,
                rho,
                fail_state,
                sparsity,
            } => RandomInstanceConfig::new(*num_states, *num_actions, *horizon, *rho)
                .with_fail_state(*fail_state)
                .with_sparsity(*sparsity)
                .generate(*seed)?,
            InstanceSource::Hard {
                theta,
                p,
                q,
                rho,
                blocks,
            } => make_hard_instance(&HardInstanceParams {
                theta: *theta,
                p: *p,
                q: *q,
                rho: *rho,
                blocks: *blocks,
            })?,
        };
        inst.ensure_valid()?;
        Ok(inst)
    }
}

/// Learner constants other than the episode budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSettings {
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub bonus_scale: f64,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        let b = BonusConfig::default();
        Self {
            c1: b.c1,
            c2: b.c2,
            delta: b.delta,
            bonus_scale: b.bonus_scale,
        }
    }
}

impl LearnerSettings {
    pub fn bonus_config(&self, episodes: usize) -> BonusConfig {
        BonusConfig {
            c1: self.c1,
            c2: self.c2,
            delta: self.delta,
            episodes,
            bonus_scale: self.bonus_scale,
        }
    }
}

/// Which policy is executed each episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySource {
    #[default]
    Learner,
    /// The robust optimal policy every episode; regret is identically zero.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub instance: InstanceSource,
    #[serde(default)]
    pub learner: LearnerSettings,
    /// Episode budget `K`.
    pub episodes: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub policy: PolicySource,
    /// Where outputs go; not recorded in written summaries.
    #[serde(default, skip_serializing)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.episodes == 0 {
            return Err(HarnessError::Config(
                "episodes (K) must be at least 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        self.learner.bonus_config(self.episodes).validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub value: f64,
    pub instantaneous_regret: f64,
    pub cumulative_regret: f64,
    /// `None` when the executed policy carries no value bounds.
    pub sandwich_ok: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub rows: Vec<EpisodeRow>,
    pub final_regret: f64,
    pub sandwich_rate: Option<f64>,
    /// 0-based episode index of the online-to-batch output policy.
    pub output_index: Option<usize>,
    #[serde(skip)]
    pub output_policy: Option<PolicyTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_regret_mean: f64,
    pub final_regret_std: f64,
    /// `(k, mean cumulative regret)` at every power of two up to `K`.
    pub checkpoints: Vec<(usize, f64)>,
    /// Least-squares slope of log regret against log k over the checkpoints
    /// `2^10..2^15` that fit in the budget.
    pub loglog_slope: Option<f64>,
    pub sandwich_rate: Option<f64>,
    /// Mean over seeds of `Regret(K) / K`: the expected suboptimality of the
    /// uniformly drawn output policy.
    pub output_policy_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub constants: BonusSnapshot,
    pub value_cap: f64,
    pub optimal_value: f64,
    pub crate_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonusSnapshot {
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
    pub episodes: usize,
    pub bonus_scale: f64,
    pub log_term: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub summary: Summary,
    pub provenance: Provenance,
    #[serde(skip)]
    pub seeds: Vec<SeedResult>,
}

/// Worker count from the environment, else the number of logical cores.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Runs `f` on a pool capped by [`worker_count`].
pub fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

struct Ground<'a> {
    instance: &'a RmdpInstance,
    spec: RobustOperatorSpec,
    optimal_value: f64,
    optimal_policy: PolicyTable,
}

impl<'a> Ground<'a> {
    fn new(instance: &'a RmdpInstance) -> Result<Self, HarnessError> {
        let spec = RobustOperatorSpec::for_instance(instance);
        let plan = robust_value_iteration(instance, &spec)?;
        Ok(Self {
            instance,
            spec,
            optimal_value: plan.v_star.get(0, instance.initial_state()),
            optimal_policy: plan.pi_star,
        })
    }

    fn value_of(&self, policy: &PolicyTable) -> Result<f64, HarnessError> {
        let (v, _) = robust_policy_evaluation(self.instance, &self.spec, policy)?;
        Ok(v.get(0, self.instance.initial_state()))
    }
}

fn run_seed(
    ground: &Ground<'_>,
    policy: PolicySource,
    config: BonusConfig,
    seed: u64,
) -> Result<SeedResult, HarnessError> {
    let inst = ground.instance;
    let mut rows = Vec::with_capacity(config.episodes);
    let mut cumulative = 0.0;
    let mut push =
        |rows: &mut Vec<EpisodeRow>, episode: usize, value: f64, sandwich_ok: Option<bool>| {
            let regret = ground.optimal_value - value;
            cumulative += regret;
            rows.push(EpisodeRow {
                episode,
                value,
                instantaneous_regret: regret,
                cumulative_regret: cumulative,
                sandwich_ok,
            });
        };
    match policy {
        PolicySource::Oracle => {
            let value = ground.value_of(&ground.optimal_policy)?;
            for k in 1..=config.episodes {
                push(&mut rows, k, value, None);
            }
            let final_regret = rows.last().map_or(0.0, |r| r.cumulative_regret);
            Ok(SeedResult {
                seed,
                rows,
                final_regret,
                sandwich_rate: None,
                output_index: None,
                output_policy: Some(ground.optimal_policy.clone()),
            })
        }
        PolicySource::Learner => {
            let mut learner = OptimisticLearner::new(inst, config, seed)?;
            let mut cached: Option<(Vec<usize>, f64)> = None;
            let mut executed = Vec::with_capacity(config.episodes);
            let mut sandwich_hits = 0usize;
            for _ in 0..config.episodes {
                let rec = learner.next_episode()?;
                let value = match &cached {
                    Some((actions, v)) if *actions == rec.actions => *v,
                    _ => {
                        let pol = deterministic(inst, &rec.actions);
                        let v = ground.value_of(&pol)?;
                        cached = Some((rec.actions.clone(), v));
                        v
                    }
                };
                let ok = rec.lower_value <= value + VALUE_SLACK
                    && value <= ground.optimal_value + VALUE_SLACK
                    && ground.optimal_value <= rec.upper_value + VALUE_SLACK;
                sandwich_hits += ok as usize;
                push(&mut rows, rec.episode, value, Some(ok));
                executed.push(rec.actions);
            }
            let output_index = learner.draw_output(executed.len());
            let final_regret = rows.last().map_or(0.0, |r| r.cumulative_regret);
            Ok(SeedResult {
                seed,
                rows,
                final_regret,
                sandwich_rate: Some(sandwich_hits as f64 / config.episodes as f64),
                output_index: Some(output_index),
                output_policy: Some(deterministic(inst, &executed[output_index])),
            })
        }
    }
}

fn deterministic(inst: &RmdpInstance, actions: &[usize]) -> PolicyTable {
    PolicyTable::deterministic(
        inst.horizon(),
        inst.num_states(),
        inst.num_actions(),
        actions,
    )
    .expect("learner actions are in range")
}

fn run_seeds(
    instance: &RmdpInstance,
    policy: PolicySource,
    config: BonusConfig,
    seeds: &[u64],
) -> Result<(f64, Vec<SeedResult>), HarnessError> {
    let ground = Ground::new(instance)?;
    let results: Result<Vec<SeedResult>, HarnessError> = in_pool(|| {
        seeds
            .par_iter()
            .map(|&seed| run_seed(&ground, policy, config, seed))
            .collect()
    });
    Ok((ground.optimal_value, results?))
}

/// Least-squares slope of `ln y` on `ln x`; `None` with fewer than two
/// points or a nonpositive `y`.
pub fn loglog_slope(points: &[(usize, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x == 0 || y <= 0.0) {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|&(x, _)| (x as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn summarize(seeds: &[SeedResult], episodes: usize) -> Summary {
    let finals: Vec<f64> = seeds.iter().map(|s| s.final_regret).collect();
    let (final_regret_mean, final_regret_std) = mean_std(&finals);
    let checkpoints: Vec<(usize, f64)> = (0..usize::BITS)
        .map(|j| 1usize << j)
        .take_while(|&k| k <= episodes)
        .map(|k| {
            let m = seeds
                .iter()
                .map(|s| s.rows[k - 1].cumulative_regret)
                .sum::<f64>()
                / seeds.len() as f64;
            (k, m)
        })
        .collect();
    let fit: Vec<(usize, f64)> = checkpoints
        .iter()
        .copied()
        .filter(|&(k, _)| SLOPE_CHECKPOINTS.contains(&k.trailing_zeros()))
        .collect();
    let rates: Vec<f64> = seeds.iter().filter_map(|s| s.sandwich_rate).collect();
    Summary {
        final_regret_mean,
        final_regret_std,
        loglog_slope: loglog_slope(&fit),
        checkpoints,
        sandwich_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        output_policy_gap: final_regret_mean / episodes as f64,
    }
}

/// Runs the configured policy source for every seed and records exact regret.
pub fn regret_experiment(config: &ExperimentConfig) -> Result<ExperimentResult, HarnessError> {
    config.validate()?;
    let instance = config.instance.resolve()?;
    let bonus = config.learner.bonus_config(config.episodes);
    let (optimal_value, seeds) = run_seeds(&instance, config.policy, bonus, &config.seeds)?;
    let result = ExperimentResult {
        config: config.clone(),
        summary: summarize(&seeds, config.episodes),
        provenance: Provenance {
            config_hash: config.hash(),
            seeds: config.seeds.clone(),
            constants: BonusSnapshot {
                c1: bonus.c1,
                c2: bonus.c2,
                delta: bonus.delta,
                episodes: bonus.episodes,
                bonus_scale: bonus.bonus_scale,
                log_term: bonus.log_term(
                    instance.num_states(),
                    instance.num_actions(),
                    instance.horizon(),
                ),
            },
            value_cap: value_cap(instance.horizon(), instance.rho()),
            optimal_value,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        seeds,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(&result, dir)?;
    }
    Ok(result)
}

pub const REGRET_CSV_HEADER: &str =
    "k,robust_value_of_pi_k,instantaneous_regret,cumulative_regret,sandwich_ok";

/// Per-episode CSV for one seed.
pub fn regret_csv(seed: &SeedResult) -> String {
    let mut out = String::with_capacity(seed.rows.len() * 64);
    out.push_str(REGRET_CSV_HEADER);
    out.push('\n');
    for r in &seed.rows {
        let flag = match r.sandwich_ok {
            Some(true) => "true",
            Some(false) => "false",
            None => "na",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.episode, r.value, r.instantaneous_regret, r.cumulative_regret, flag
        );
    }
    out
}

/// Writes `regret_seed<seed>.csv` per seed and `summary.json`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    for seed in &result.seeds {
        fs::write(
            dir.join(format!("regret_seed{}.csv", seed.seed)),
            regret_csv(seed),
        )?;
    }
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(result)? + "\n",
    )?;
    Ok(())
}

/// Hard-instance experiment settings; the instance radius is `2 * rho`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessConfig {
    pub p: f64,
    pub q: f64,
    /// Relocated probability mass.
    pub rho: f64,
    #[serde(default = "one")]
    pub blocks: usize,
    #[serde(default)]
    pub learner: LearnerSettings,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Also run both instances with an appended fail state.
    #[serde(default)]
    pub contrast: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaOutcome {
    pub theta: usize,
    pub regret_per_seed: Vec<f64>,
    pub mean_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessReport {
    pub per_theta: Vec<ThetaOutcome>,
    pub max_mean_regret: f64,
    /// `(p - q) * rho * K / 2`.
    pub threshold: f64,
    pub holds: bool,
    /// Same runs on the fail-state versions of both instances.
    pub contrast: Option<Vec<ThetaOutcome>>,
}

fn theta_outcome(theta: usize, seeds: &[SeedResult]) -> ThetaOutcome {
    let regret_per_seed: Vec<f64> = seeds.iter().map(|s| s.final_regret).collect();
    let mean_regret = regret_per_seed.iter().sum::<f64>() / regret_per_seed.len() as f64;
    ThetaOutcome {
        theta,
        regret_per_seed,
        mean_regret,
    }
}

/// Runs the learner on both hard instances with identical seeds.
pub fn hardness_experiment(config: &HardnessConfig) -> Result<HardnessReport, HarnessError> {
    if config.episodes == 0 || config.seeds.is_empty() {
        return Err(HarnessError::Config(
            "need K >= 1 and at least one seed".into(),
        ));
    }
    let bonus = config.learner.bonus_config(config.episodes);
    bonus.validate()?;
    let mut per_theta = Vec::with_capacity(2);
    let mut contrast = Vec::with_capacity(2);
    for theta in 0..2 {
        let params = HardInstanceParams {
            theta,
            p: config.p,
            q: config.q,
            rho: config.rho,
            blocks: config.blocks,
        };
        let inst = make_hard_instance(&params)?;
        let (_, seeds) = run_seeds(&inst, PolicySource::Learner, bonus, &config.seeds)?;
        per_theta.push(theta_outcome(theta, &seeds));
        if config.contrast {
            let (_, seeds) = run_seeds(
                &augment_with_fail_state(&inst),
                PolicySource::Learner,
                bonus,
                &config.seeds,
            )?;
            contrast.push(theta_outcome(theta, &seeds));
        }
    }
    let max_mean_regret = per_theta
        .iter()
        .map(|t| t.mean_regret)
        .fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.5 * (config.p - config.q) * config.rho * config.episodes as f64;
    Ok(HardnessReport {
        max_mean_regret,
        threshold,
        holds: max_mean_regret >= threshold,
        per_theta,
        contrast: config.contrast.then_some(contrast),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Base instance; its radius is replaced by each grid value.
    pub instance: InstanceSource,
    pub grid: Vec<f64>,
    #[serde(default)]
    pub learner: LearnerSettings,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// Target suboptimality of the uniform-mixture output policy.
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub optimal_value: f64,
    pub final_regret_mean: f64,
    /// Mean over seeds of the first `k` with `Regret(k) / k <= epsilon`;
    /// seeds that never get there count as `K`.
    pub sample_complexity_mean: f64,
    pub seeds_reached: usize,
    /// `epsilon <= min{1, 1/(m H)}` with `m = rho / 2` the relocated mass: the
    /// range where the sample-complexity guarantee is stated (up to an
    /// unspecified constant).
    pub epsilon_in_range: bool,
}

fn first_within(rows: &[EpisodeRow], epsilon: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.cumulative_regret / r.episode as f64 <= epsilon)
        .map(|r| r.episode)
}

/// Final regret and empirical sample complexity at each radius in the grid.
pub fn rho_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>, HarnessError> {
    if config.episodes == 0 || config.seeds.is_empty() || config.grid.is_empty() {
        return Err(HarnessError::Config(
            "need K >= 1, a seed and a nonempty grid".into(),
        ));
    }
    if !(config.epsilon > 0.0) {
        return Err(HarnessError::Config(format!(
            "epsilon must be positive, got {}",
            config.epsilon
        )));
    }
    let bonus = config.learner.bonus_config(config.episodes);
    bonus.validate()?;
    let base = config.instance.resolve()?;
    let mut rows = Vec::with_capacity(config.grid.len());
    for &rho in &config.grid {
        let inst = base.with_rho(rho);
        inst.ensure_valid()?;
        let vanishing = check_vanishing_minimal_value(&inst)?;
        if !vanishing.holds {
            return Err(HarnessError::Config(format!(
                "instance at radius {rho} has min_s V*_1(s) = {} > 0; sweep instances need a zero-value state",
                vanishing.min_value
            )));
        }
        let (optimal_value, seeds) = run_seeds(&inst, PolicySource::Learner, bonus, &config.seeds)?;
        let firsts: Vec<Option<usize>> = seeds
            .iter()
            .map(|s| first_within(&s.rows, config.epsilon))
            .collect();
        let n = seeds.len() as f64;
        let h = inst.horizon() as f64;
        let range = if rho > 0.0 {
            (1.0f64).min(2.0 / (rho * h))
        } else {
            1.0
        };
        rows.push(SweepRow {
            rho,
            optimal_value,
            final_regret_mean: seeds.iter().map(|s| s.final_regret).sum::<f64>() / n,
            sample_complexity_mean: firsts
                .iter()
                .map(|f| f.unwrap_or(config.episodes) as f64)
                .sum::<f64>()
                / n,
            seeds_reached: firsts.iter().filter(|f| f.is_some()).count(),
            epsilon_in_range: config.epsilon <= range,
        });
    }
    Ok(rows)
}

pub const SWEEP_CSV_HEADER: &str =
    "rho,optimal_value,final_regret_mean,sample_complexity_mean,seeds_reached,epsilon_in_range";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.rho,
            r.optimal_value,
            r.final_regret_mean,
            r.sample_complexity_mean,
            r.seeds_reached,
            r.epsilon_in_range
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(policy: PolicySource) -> ExperimentConfig {
        ExperimentConfig {
            instance: InstanceSource::Random {
                seed: 5,
                num_states: 3,
                num_actions: 2,
                horizon: 3,
                rho: 0.3,
                fail_state: true,
                sparsity: 0.0,
            },
            learner: LearnerSettings {
                bonus_scale: 0.1,
                ..Default::default()
            },
            episodes: 64,
            seeds: vec![1, 2],
            policy,
            output_dir: None,
        }
    }

    #[test]
    fn oracle_policy_has_zero_regret() {
        let res = regret_experiment(&small_config(PolicySource::Oracle)).unwrap();
        for seed in &res.seeds {
            assert!(seed
                .rows
                .iter()
                .all(|r| r.instantaneous_regret.abs() < 1e-12));
        }
        assert!(res.summary.final_regret_mean.abs() < 1e-9);
    }

    #[test]
    fn zero_episodes_rejected() {
        let mut cfg = small_config(PolicySource::Learner);
        cfg.episodes = 0;
        let err = regret_experiment(&cfg).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn regret_is_nonnegative_and_accumulates() {
        let res = regret_experiment(&small_config(PolicySource::Learner)).unwrap();
        for seed in &res.seeds {
            let mut prev = 0.0;
            for r in &seed.rows {
                assert!(r.instantaneous_regret >= -VALUE_SLACK);
                assert!(r.cumulative_regret >= prev - VALUE_SLACK);
                prev = r.cumulative_regret;
            }
        }
        assert_eq!(res.provenance.config_hash.len(), 64);
        assert_eq!(res.summary.checkpoints.len(), 7);
        assert!(res.summary.loglog_slope.is_none());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = small_config(PolicySource::Learner);
        let b = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        let c = ExperimentConfig {
            episodes: 65,
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn slope_of_power_law_is_recovered() {
        let pts: Vec<(usize, f64)> = (10..=15)
            .map(|j| (1usize << j, 3.0 * ((1u64 << j) as f64).powf(0.5)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 0.5).abs() < 1e-12);
        assert!(loglog_slope(&pts[..1]).is_none());
    }

    #[test]
    fn csv_layout() {
        let res = regret_experiment(&small_config(PolicySource::Oracle)).unwrap();
        let csv = regret_csv(&res.seeds[0]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(REGRET_CSV_HEADER));
        assert!(lines.next().unwrap().ends_with(",na"));
        assert_eq!(csv.lines().count(), 65);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = small_config(PolicySource::Learner);
        let back: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn sweep_rejects_instances_without_zero_value_state() {
        let cfg = SweepConfig {
            instance: InstanceSource::Random {
                seed: 1,
                num_states: 2,
                num_actions: 2,
                horizon: 2,
                rho: 0.0,
                fail_state: false,
                sparsity: 0.0,
            },
            grid: vec![0.0],
            learner: LearnerSettings::default(),
            episodes: 4,
            seeds: vec![1],
            epsilon: 0.1,
        };
        assert!(matches!(rho_sweep(&cfg), Err(HarnessError::Config(_))));
    }
}
