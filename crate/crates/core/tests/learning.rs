use rand::Rng;

use mad_core::diffcore::Activation;
use mad_core::dynamics::{rollout, train_transition, OraclePlanner, TransitionConfig};
use mad_core::envs::{BehaviorPolicy, Dataset, Env, EnvSpec, State, Trajectory};
use mad_core::evalharness::{eval_planning, mad_mse};
use mad_core::madlearn::{onestep_violation_rate, train_embedding, HeadKind, TrainConfig};
use mad_core::oracle::ground_truth;
use mad_core::seed;

/// Random walks on a path of five states; features are the position.
fn path_dataset() -> Dataset {
    let mut rng = seed::rng(5);
    let trajectories = (0..40)
        .map(|_| {
            let mut x: i64 = rng.gen_range(0..5);
            let mut states = vec![State(vec![x as f64 / 4.0])];
            let mut actions = Vec::new();
            for _ in 0..8 {
                let a = rng.gen_range(0..2);
                x = (x + if a == 0 { -1 } else { 1 }).clamp(0, 4);
                states.push(State(vec![x as f64 / 4.0]));
                actions.push(a);
            }
            Trajectory { states, actions }
        })
        .collect();
    Dataset { env_spec: EnvSpec::grid(5, 2, 8), seed: 5, trajectories }
}

/// Endless loop 0 -> 1 -> 2 -> 0 with one-hot features.
fn cycle_dataset() -> Dataset {
    let one_hot = |k: usize| State((0..3).map(|i| f64::from(u8::from(i == k))).collect());
    let trajectories = (0..3)
        .map(|start| Trajectory {
            states: (0..10).map(|t| one_hot((start + t) % 3)).collect(),
            actions: vec![0; 9],
        })
        .collect();
    Dataset { env_spec: EnvSpec::grid(3, 2, 9), seed: 0, trajectories }
}

#[test]
fn l1_embedding_learns_unit_steps_on_a_path() {
    let ds = path_dataset();
    let mut config = TrainConfig::new(HeadKind::Pnorm, 1);
    config.hidden = vec![16];
    config.epochs = 300;
    let model = train_embedding(&ds, &config, None).unwrap().model;
    let (mut good, mut total) = (0, 0);
    for traj in &ds.trajectories {
        for (s, _, next) in traj.transitions() {
            if s == next {
                continue;
            }
            let d = model.head.distance(&model.embed(s).unwrap(), &model.embed(next).unwrap()).unwrap();
            total += 1;
            if (0.8..=1.2).contains(&d) {
                good += 1;
            }
        }
    }
    assert!(good as f64 >= 0.95 * total as f64, "{good}/{total} one-step distances in [0.8, 1.2]");
}

#[test]
fn wide_norm_orients_a_three_cycle() {
    let ds = cycle_dataset();
    let states: Vec<State> = ds.trajectories[0].states[..3].to_vec();
    let distances = |head| {
        let mut config = TrainConfig::new(head, 4);
        config.hidden = vec![16];
        config.max_pair_offset = None;
        let model = train_embedding(&ds, &config, None).unwrap().model;
        let z: Vec<_> = states.iter().map(|s| model.embed(s).unwrap()).collect();
        let d = |i: usize, j: usize| model.head.distance(&z[i], &z[j]).unwrap();
        (d(0, 1), d(1, 0))
    };
    let (forward, backward) = distances(HeadKind::Widenorm);
    assert!(forward < backward, "wide norm: d(0,1) = {forward}, d(1,0) = {backward}");
    let (forward, backward) = distances(HeadKind::Pnorm);
    assert!((forward - backward).abs() <= 0.2, "l1: d(0,1) = {forward}, d(1,0) = {backward}");
}

#[test]
fn penalty_keeps_one_step_distances_bounded() {
    let env = Env::new(EnvSpec::grid(10, 10, 30)).unwrap();
    let ds = env.collect(BehaviorPolicy::UniformRandom, 200, 30, 1);
    for head in [HeadKind::Pnorm, HeadKind::Widenorm] {
        let model = train_embedding(&ds, &TrainConfig::new(head, 16), None).unwrap().model;
        let rate = onestep_violation_rate(&model, &ds, 0.1).unwrap();
        assert!(rate < 0.05, "{head:?}: {rate}");
    }
}

#[test]
fn training_logs_oracle_error_and_is_deterministic() {
    let env = Env::new(EnvSpec::grid(4, 4, 12)).unwrap();
    let truth = ground_truth(&env, None).unwrap();
    let ds = env.collect(BehaviorPolicy::UniformRandom, 30, 12, 2);
    let mut config = TrainConfig::new(HeadKind::Widenorm, 4);
    config.hidden = vec![16];
    config.epochs = 40;
    let a = train_embedding(&ds, &config, Some((&env, &truth))).unwrap();
    let b = train_embedding(&ds, &config, Some((&env, &truth))).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log.len(), 40);
    let last = a.log.last().unwrap().mad_mse.unwrap();
    assert_eq!(last, mad_mse(&a.model, &truth.table, &truth.states).unwrap().mse);
    assert!(last < a.log[0].mad_mse.unwrap());
}

#[test]
fn transition_training_reduces_latent_error() {
    let env = Env::new(EnvSpec::grid(5, 5, 15)).unwrap();
    let ds = env.collect(BehaviorPolicy::UniformRandom, 50, 15, 3);
    let mut config = TrainConfig::new(HeadKind::Pnorm, 4);
    config.hidden = vec![16];
    config.epochs = 20;
    let embedding = train_embedding(&ds, &config, None).unwrap().model;
    for residual in [true, false] {
        let tc = TransitionConfig { hidden: vec![32], activation: Activation::Tanh, residual, ..Default::default() };
        let trained = train_transition(&ds, &embedding, env.num_actions(), &tc).unwrap();
        let (first, last) = (trained.log[0], *trained.log.last().unwrap());
        assert!(last < 0.5 * first, "residual {residual}: {first} -> {last}");
    }
}

#[test]
fn exact_models_take_shortest_paths() {
    let specs = [
        EnvSpec::grid(2, 2, 5),
        EnvSpec::grid(3, 3, 5),
        EnvSpec::grid(5, 5, 5),
        EnvSpec::grid(5, 3, 5),
        EnvSpec::oneway_barrier(5, 4, 5),
    ];
    for spec in specs {
        let env = Env::new(spec).unwrap();
        let truth = ground_truth(&env, None).unwrap();
        let planner = OraclePlanner { env: &env, truth: &truth };
        for (i, start) in truth.states.iter().enumerate() {
            for (j, goal) in truth.states.iter().enumerate() {
                let d = truth.table.get(i, j).unwrap() as usize;
                let result = rollout(&env, &planner, start, goal, 100).unwrap();
                assert!(result.reached);
                assert_eq!(result.steps, d, "{i} -> {j}");
            }
        }
    }
}

#[test]
fn exact_models_always_succeed() {
    let env = Env::new(EnvSpec::grid(3, 3, 5)).unwrap();
    let truth = ground_truth(&env, None).unwrap();
    let planner = OraclePlanner { env: &env, truth: &truth };
    let stats = eval_planning(&env, &planner, &truth, 50, 16, 0).unwrap();
    assert_eq!(stats.success_rate, 1.0);
    assert_eq!(stats.n_pairs, 50);
}
