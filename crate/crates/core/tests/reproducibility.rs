use robustrl::experiment::{
    regret_csv, regret_experiment, ExperimentConfig, InstanceSource, LearnerSettings, PolicySource,
};

fn config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        instance: InstanceSource::Random {
            seed: 3,
            num_states: 3,
            num_actions: 2,
            horizon: 4,
            rho: 0.3,
            fail_state: true,
            sparsity: 0.0,
        },
        learner: LearnerSettings {
            bonus_scale: 0.1,
            ..LearnerSettings::default()
        },
        episodes: 300,
        seeds,
        policy: PolicySource::Learner,
        output_dir: None,
    }
}

#[test]
fn same_seed_gives_byte_identical_csv() {
    let a = regret_experiment(&config(vec![7])).unwrap();
    let b = regret_experiment(&config(vec![7])).unwrap();
    assert_eq!(regret_csv(&a.seeds[0]), regret_csv(&b.seeds[0]));
    assert_eq!(a.seeds[0].output_index, b.seeds[0].output_index);
}

#[test]
fn seed_results_do_not_depend_on_the_other_seeds() {
    let alone = regret_experiment(&config(vec![11])).unwrap();
    let together = regret_experiment(&config(vec![5, 11, 9])).unwrap();
    let s = together.seeds.iter().find(|s| s.seed == 11).unwrap();
    assert_eq!(regret_csv(&alone.seeds[0]), regret_csv(s));
}

#[test]
fn written_outputs_are_identical_across_runs() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&d1, &d2] {
        let mut c = config(vec![1, 2]);
        c.output_dir = Some(dir.path().to_path_buf());
        regret_experiment(&c).unwrap();
    }
    for name in ["regret_seed1.csv", "regret_seed2.csv", "summary.json"] {
        let a = std::fs::read_to_string(d1.path().join(name)).unwrap();
        let b = std::fs::read_to_string(d2.path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn different_seeds_explore_differently() {
    let r = regret_experiment(&config(vec![1, 2])).unwrap();
    assert_ne!(regret_csv(&r.seeds[0]), regret_csv(&r.seeds[1]));
}

#[test]
fn config_hash_ignores_output_directory() {
    let mut a = config(vec![1]);
    let b = a.clone();
    a.output_dir = Some("/tmp/somewhere".into());
    assert_eq!(a.hash(), b.hash());
    let mut c = b.clone();
    c.episodes += 1;
    assert_ne!(c.hash(), b.hash());
}
