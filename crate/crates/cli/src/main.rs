//! Command-line front end: planning, evaluation, learning, instance
//! generation and the experiment harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use robustrl::checks::{check_suite, CheckOptions};
use robustrl::environments::{
    make_hard_instance, to_auxiliary_tv, DiscountedInstance, HardInstanceParams,
    RandomInstanceConfig,
};
use robustrl::experiment::{
    hardness_experiment, regret_csv, regret_experiment, rho_sweep, sweep_csv, ExperimentConfig,
    HardnessConfig, HarnessError, InstanceSource, LearnerSettings, PolicySource, SweepConfig,
};
use robustrl::model::{ModelError, PolicyTable, RmdpInstance, RobustOperatorSpec};
use robustrl::planning::{
    check_vanishing_minimal_value, gap_diagnostic, robust_policy_evaluation,
    robust_value_iteration, PlanningError,
};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "robustrl",
    version,
    about = "Robust MDP planning, learning and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Robust value iteration on an instance file.
    Plan(PlanArgs),
    /// Robust evaluation of a policy file.
    Evaluate(EvaluateArgs),
    /// Run the learner and record exact per-episode regret.
    Learn(LearnArgs),
    /// Write a generated instance file.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Learner regret on both hard instances against the linear floor.
    Hardness(HardnessArgs),
    /// Final regret and sample complexity across a radius grid.
    Sweep(SweepArgs),
    /// Seeded property suite.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OperatorArg {
    TvFull,
    TvVanishing,
    BoundedRatio,
}

#[derive(Args)]
struct OperatorOpts {
    /// Robust operator; defaults to the full TV dual.
    #[arg(long, value_enum, default_value = "tv-full")]
    operator: OperatorArg,
    /// Operator parameter; defaults to the instance radius (TV kinds) or
    /// `1 - radius / 2` (bounded ratio).
    #[arg(long)]
    param: Option<f64>,
}

impl OperatorOpts {
    fn spec(&self, inst: &RmdpInstance) -> RobustOperatorSpec {
        match self.operator {
            OperatorArg::TvFull => RobustOperatorSpec::tv_full(self.param.unwrap_or(inst.rho())),
            OperatorArg::TvVanishing => {
                RobustOperatorSpec::tv_vanishing(self.param.unwrap_or(inst.rho()))
            }
            OperatorArg::BoundedRatio => {
                RobustOperatorSpec::bounded_ratio(self.param.unwrap_or(1.0 - inst.rho() / 2.0))
            }
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    operator: OperatorOpts,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    operator: OperatorOpts,
}

#[derive(Args)]
struct LearnerOpts {
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    bonus_scale: Option<f64>,
}

impl LearnerOpts {
    fn apply(&self, mut s: LearnerSettings) -> LearnerSettings {
        s.delta = self.delta.unwrap_or(s.delta);
        s.c1 = self.c1.unwrap_or(s.c1);
        s.c2 = self.c2.unwrap_or(s.c2);
        s.bonus_scale = self.bonus_scale.unwrap_or(s.bonus_scale);
        s
    }
}

#[derive(Args)]
struct LearnArgs {
    /// Experiment config (JSON); flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Episode budget K.
    #[arg(long)]
    episodes: Option<usize>,
    /// Learner seed; repeat for several runs.
    #[arg(long, required = true)]
    seed: Vec<u64>,
    #[command(flatten)]
    learner: LearnerOpts,
    /// Execute the robust optimal policy instead of learning.
    #[arg(long)]
    oracle: bool,
    /// Directory for per-seed CSV files and summary.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Per-episode CSV (single seed only).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Output policy file (single seed only).
    #[arg(long)]
    policy_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenCommand {
    /// Two-state hard instance; `rho` is the relocated mass.
    Hard {
        #[arg(long, default_value_t = 0)]
        theta: usize,
        #[arg(long, default_value_t = 0.8)]
        p: f64,
        #[arg(long, default_value_t = 0.4)]
        q: f64,
        #[arg(long, default_value_t = 0.2)]
        rho: f64,
        #[arg(long, default_value_t = 1)]
        blocks: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dirichlet(1) kernel and uniform rewards.
    Random {
        #[arg(long)]
        seed: u64,
        #[arg(long = "S")]
        num_states: usize,
        #[arg(long = "A")]
        num_actions: usize,
        #[arg(long = "H")]
        horizon: usize,
        #[arg(long)]
        rho: f64,
        #[arg(long)]
        fail_state: bool,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Auxiliary TV instance of a discounted bounded-ratio model.
    DiscountedAux {
        /// Base instance with undiscounted rewards (its radius is ignored).
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        rho_prime: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct HardnessArgs {
    #[arg(long, default_value_t = 0.8)]
    p: f64,
    #[arg(long, default_value_t = 0.4)]
    q: f64,
    /// Relocated mass.
    #[arg(long, default_value_t = 0.2)]
    rho: f64,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long, default_value_t = 5000)]
    episodes: usize,
    #[arg(long, required = true)]
    seed: Vec<u64>,
    #[command(flatten)]
    learner: LearnerOpts,
    /// Also run the fail-state versions of both instances.
    #[arg(long)]
    contrast: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Base instance; it must have a zero-value state at every grid radius.
    #[arg(long)]
    instance: PathBuf,
    /// Comma-separated radii.
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6,0.9")]
    grid: Vec<f64>,
    #[arg(long)]
    episodes: usize,
    #[arg(long, required = true)]
    seed: Vec<u64>,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[command(flatten)]
    learner: LearnerOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    /// Mutation test: use `rho` instead of `rho / 2` as the dual coefficient.
    #[arg(long, hide = true)]
    inject_dual_bug: bool,
}

enum Failure {
    Usage(String),
    Validation(anyhow::Error),
    Property(String),
    Other(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() || matches!(e, HarnessError::Io(_)) {
            Failure::Validation(e.into())
        } else {
            Failure::Other(e.into())
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<PlanningError> for Failure {
    fn from(e: PlanningError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

type Outcome = Result<(), Failure>;

fn load_instance(path: &Path) -> Result<RmdpInstance, Failure> {
    let inst = RmdpInstance::load(path).map_err(|e| {
        Failure::Validation(anyhow::Error::new(e).context(format!("reading {}", path.display())))
    })?;
    inst.ensure_valid().map_err(|e| {
        Failure::Validation(anyhow::Error::new(e).context(format!("validating {}", path.display())))
    })?;
    Ok(inst)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).context("serializing output")? + "\n";
    match out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn plan(args: &PlanArgs) -> Outcome {
    let inst = load_instance(&args.instance)?;
    let spec = args.operator.spec(&inst);
    let res = robust_value_iteration(&inst, &spec)?;
    let gaps = gap_diagnostic(&res, &inst);
    let vanishing = check_vanishing_minimal_value(&inst)?;
    let ns = inst.num_states();
    let policy: Vec<Vec<usize>> = (0..inst.horizon())
        .map(|h| {
            (0..ns)
                .map(|s| {
                    res.pi_star
                        .action(h, s)
                        .expect("greedy policy is deterministic")
                        + 1
                })
                .collect()
        })
        .collect();
    let mut v_star = res.v_star.to_nested();
    v_star.pop();
    let value = json!({
        "operator": spec,
        "H": inst.horizon(),
        "S": ns,
        "A": inst.num_actions(),
        "initial_value": res.v_star.get(0, inst.initial_state()),
        "v_star": v_star,
        "q_star": res.q_star.to_nested(),
        "policy": policy,
        "vanishing_min_value": {
            "holds": vanishing.holds,
            "min_value": vanishing.min_value,
            "argmin_state": vanishing.argmin_state + 1,
        },
        "gaps": gaps.stages.iter().map(|g| json!({
            "stage": g.stage,
            "value_gap": g.value_gap,
            "q_gap": g.q_gap,
            "coarse_bound": g.coarse_bound,
            "stage_bound": g.stage_bound,
            "budget_stage_bound": g.budget_stage_bound,
            "within_bounds": g.within(1e-9),
        })).collect::<Vec<_>>(),
    });
    emit(args.out.as_deref(), &value)
}

fn evaluate(args: &EvaluateArgs) -> Outcome {
    let inst = load_instance(&args.instance)?;
    let policy = PolicyTable::load(&args.policy)?;
    let spec = args.operator.spec(&inst);
    let (v, q) = robust_policy_evaluation(&inst, &spec, &policy)?;
    let mut values = v.to_nested();
    values.pop();
    let value = json!({
        "operator": spec,
        "initial_value": v.get(0, inst.initial_state()),
        "values": values,
        "q_values": q.to_nested(),
    });
    emit(args.out.as_deref(), &value)
}

fn learn(args: &LearnArgs) -> Outcome {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let instance = args.instance.clone().ok_or_else(|| {
                Failure::Usage("either --config or --instance is required".into())
            })?;
            let episodes = args
                .episodes
                .ok_or_else(|| Failure::Usage("--episodes is required without --config".into()))?;
            ExperimentConfig {
                instance: InstanceSource::File { path: instance },
                learner: LearnerSettings::default(),
                episodes,
                seeds: Vec::new(),
                policy: PolicySource::Learner,
                output_dir: None,
            }
        }
    };
    if let Some(path) = &args.instance {
        config.instance = InstanceSource::File { path: path.clone() };
    }
    if let Some(k) = args.episodes {
        config.episodes = k;
    }
    config.seeds = args.seed.clone();
    config.learner = args.learner.apply(config.learner);
    if args.oracle {
        config.policy = PolicySource::Oracle;
    }
    if args.out_dir.is_some() {
        config.output_dir = args.out_dir.clone();
    }
    if (args.csv.is_some() || args.policy_out.is_some()) && config.seeds.len() != 1 {
        return Err(Failure::Usage(
            "--csv and --policy-out need exactly one --seed".into(),
        ));
    }
    let result = regret_experiment(&config)?;
    if let Some(path) = &args.csv {
        write_text(path, &regret_csv(&result.seeds[0]))?;
    }
    if let Some(path) = &args.policy_out {
        let policy = result.seeds[0]
            .output_policy
            .as_ref()
            .expect("every run yields an output policy");
        policy.save(path)?;
    }
    let s = &result.summary;
    println!("config_hash {}", result.provenance.config_hash);
    println!("optimal_value {}", result.provenance.optimal_value);
    println!(
        "final_regret_mean {} (std {})",
        s.final_regret_mean, s.final_regret_std
    );
    if let Some(slope) = s.loglog_slope {
        println!("loglog_slope {slope}");
    }
    if let Some(rate) = s.sandwich_rate {
        println!("sandwich_rate {rate}");
    }
    println!("output_policy_gap {}", s.output_policy_gap);
    Ok(())
}

fn gen(cmd: &GenCommand) -> Outcome {
    let validation = |e: robustrl::environments::EnvError| Failure::Validation(e.into());
    let (inst, out) = match cmd {
        GenCommand::Hard {
            theta,
            p,
            q,
            rho,
            blocks,
            out,
        } => {
            let params = HardInstanceParams {
                theta: *theta,
                p: *p,
                q: *q,
                rho: *rho,
                blocks: *blocks,
            };
            (make_hard_instance(&params).map_err(validation)?, out)
        }
        GenCommand::Random {
            seed,
            num_states,
            num_actions,
            horizon,
            rho,
            fail_state,
            sparsity,
            out,
        } => {
            let inst = RandomInstanceConfig::new(*num_states, *num_actions, *horizon, *rho)
                .with_fail_state(*fail_state)
                .with_sparsity(*sparsity)
                .generate(*seed)
                .map_err(validation)?;
            (inst, out)
        }
        GenCommand::DiscountedAux {
            instance,
            gamma,
            rho_prime,
            out,
        } => {
            let base = RmdpInstance::load(instance)?.with_rho(0.0);
            base.ensure_valid()?;
            let d = DiscountedInstance::new(base, *gamma, *rho_prime).map_err(validation)?;
            (to_auxiliary_tv(&d).map_err(validation)?, out)
        }
    };
    inst.save(out)?;
    Ok(())
}

fn hardness(args: &HardnessArgs) -> Outcome {
    let config = HardnessConfig {
        p: args.p,
        q: args.q,
        rho: args.rho,
        blocks: args.blocks,
        learner: args.learner.apply(LearnerSettings::default()),
        episodes: args.episodes,
        seeds: args.seed.clone(),
        contrast: args.contrast,
    };
    let report = hardness_experiment(&config)?;
    for t in &report.per_theta {
        println!("theta {} mean_regret {}", t.theta, t.mean_regret);
    }
    if let Some(contrast) = &report.contrast {
        for t in contrast {
            println!("fail_state theta {} mean_regret {}", t.theta, t.mean_regret);
        }
    }
    println!(
        "max_mean_regret {} threshold {}",
        report.max_mean_regret, report.threshold
    );
    if let Some(path) = &args.out {
        emit(
            Some(path),
            &serde_json::to_value(&report).context("serializing report")?,
        )?;
    }
    if report.holds {
        Ok(())
    } else {
        Err(Failure::Property(format!(
            "max mean regret {} is below the linear floor {}",
            report.max_mean_regret, report.threshold
        )))
    }
}

fn sweep(args: &SweepArgs) -> Outcome {
    let config = SweepConfig {
        instance: InstanceSource::File {
            path: args.instance.clone(),
        },
        grid: args.grid.clone(),
        learner: args.learner.apply(LearnerSettings::default()),
        episodes: args.episodes,
        seeds: args.seed.clone(),
        epsilon: args.epsilon,
    };
    let rows = rho_sweep(&config)?;
    if rows.iter().any(|r| !r.epsilon_in_range) {
        eprintln!(
            "note: epsilon {} exceeds min(1, 2/(rho H)) for some radii",
            args.epsilon
        );
    }
    let csv = sweep_csv(&rows);
    match &args.out {
        Some(path) => write_text(path, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn check(args: &CheckArgs) -> Outcome {
    let report = check_suite(&CheckOptions {
        seed: args.seed,
        num_cases: args.cases,
        inject_dual_bug: args.inject_dual_bug,
    });
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let failing: Vec<&str> = report
            .properties
            .iter()
            .filter(|p| !p.passed())
            .map(|p| p.name)
            .collect();
        Err(Failure::Property(format!(
            "failing properties: {}",
            failing.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match &cli.command {
        Command::Plan(a) => plan(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Learn(a) => learn(a),
        Command::Gen(c) => gen(c),
        Command::Hardness(a) => hardness(a),
        Command::Sweep(a) => sweep(a),
        Command::Check(a) => check(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Validation(e)) => {
            eprintln!("validation error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Property(msg)) => {
            eprintln!("property failure: {msg}");
            ExitCode::from(EXIT_PROPERTY)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}
