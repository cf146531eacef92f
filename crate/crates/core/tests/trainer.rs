use std::path::Path;

use maskswitch::checkpoint::{self, Checkpoint};
use maskswitch::eval::{self, rung_losses};
use maskswitch::losses::CostModel;
use maskswitch::model::init_params;
use maskswitch::policies::Policy;
use maskswitch::pyramid::ModelConfig;
use maskswitch::synth::{generate_dataset, Dataset, FamilyCounts, ShapeSizes};
use maskswitch::trainer::{pretrain, train_joint, StepLog, TrainConfig, TrainState};

const SMALL: ModelConfig = ModelConfig { channels: 4, msm_hidden: 2, msm_fc: 6 };

fn dataset(per_family: usize, seed: u64, dir: &Path) -> Dataset {
    generate_dataset(&FamilyCounts::uniform(per_family), &ShapeSizes::default(), seed, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn config(policy: Policy) -> TrainConfig {
    TrainConfig {
        seed: 3,
        pretrain_steps: 4,
        joint_steps: 4,
        batch_size: 2,
        lr: 0.01,
        warmup_steps: 2,
        policy,
        ..TrainConfig::default()
    }
}

fn run(data: &Dataset, cfg: &TrainConfig, cost: &CostModel) -> (TrainState, Vec<StepLog>) {
    let mut state = TrainState::new(init_params(&SMALL, cfg.seed, cfg.policy.uses_switch()).unwrap());
    let mut logs = Vec::new();
    pretrain(&mut state, data, cfg, cost, |l| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    train_joint(&mut state, data, cfg, cost, |l| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    (state, logs)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 1, dir.path());
    let cfg = TrainConfig { lr: 0.0, ..config(Policy::Dynamic) };
    let before = init_params::<f32>(&SMALL, cfg.seed, true).unwrap();
    let (state, _) = run(&data, &cfg, &CostModel::default());
    assert_eq!(state.params, before);
    assert_eq!(state.step, 8);
}

#[test]
fn same_seed_same_parameters_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 2, dir.path());
    let cfg = config(Policy::Dynamic);
    let cost = CostModel::default();
    let (a, la) = run(&data, &cfg, &cost);
    let (b, lb) = run(&data, &cfg, &cost);
    assert_eq!(a, b);
    let json = |l: &[StepLog]| l.iter().map(|x| serde_json::to_string(x).unwrap()).collect::<Vec<_>>();
    assert_eq!(json(&la), json(&lb));
    let (c, _) = run(&data, &TrainConfig { seed: 4, ..cfg }, &cost);
    assert_ne!(a.params, c.params);
}

#[test]
fn unbindable_budget_stays_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 3, dir.path());
    let cost = CostModel { target: 1.40, ..CostModel::default() };
    let cfg = TrainConfig { joint_steps: 6, ..config(Policy::Dynamic) };
    let (_, logs) = run(&data, &cfg, &cost);
    let joint: Vec<_> = logs.iter().filter(|l| l.tau.is_some()).collect();
    assert_eq!(joint.len(), 6);
    for l in joint {
        assert!(l.loss.expected_cost <= 1.40);
        assert_eq!(l.loss.l_budget, 0.0);
    }
}

/// The sampled path is live: one joint step over budget moves the switch.
#[test]
fn violated_budget_moves_the_switch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 4, dir.path());
    let cost = CostModel { target: 0.3, ..CostModel::default() };
    let cfg = TrainConfig { joint_steps: 1, momentum: 0.0, ..config(Policy::Dynamic) };
    let mut state = TrainState::new(init_params(&SMALL, cfg.seed, true).unwrap());
    let before = state.params.clone();
    let mut logs = Vec::new();
    train_joint(&mut state, &data, &cfg, &cost, |l| {
        logs.push(l.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(logs.len(), 1);
    assert!(logs[0].loss.l_budget > 0.0, "{:?}", logs[0].loss);
    let moved: f64 = before
        .iter()
        .filter(|(n, _)| n.starts_with("msm."))
        .map(|(n, t)| {
            let after = state.params.get(n).unwrap();
            t.data().iter().zip(after.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>()
        })
        .sum();
    assert!(moved > 0.0);
}

#[test]
fn fixed_policy_logs_no_switch_terms() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 5, dir.path());
    let cfg = config(Policy::Fixed(4));
    let (state, logs) = run(&data, &cfg, &CostModel::default());
    assert!(!maskswitch::msm::has_msm(&state.params));
    let joint: Vec<_> = logs.iter().filter(|l| l.phase.name() == "joint").collect();
    assert_eq!(joint.len(), cfg.joint_steps);
    for l in joint {
        assert_eq!((l.loss.l_budget, l.loss.l_entropy, l.tau, l.mean_probs), (0.0, 0.0, None, None));
        assert_eq!(l.rung_counts, [0, 0, 0, cfg.batch_size]);
    }
}

#[test]
fn dynamic_training_without_switch_weights_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 6, dir.path());
    let cfg = config(Policy::Dynamic);
    let mut state = TrainState::new(init_params(&SMALL, 0, false).unwrap());
    let r = train_joint(&mut state, &data, &cfg, &CostModel::default(), |_| Ok(()));
    assert!(matches!(r, Err(maskswitch::Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 7, &dir.path().join("data"));
    let cfg = config(Policy::Dynamic);
    let cost = CostModel::default();
    let (state, _) = run(&data, &cfg, &cost);
    let hash = [7u8; 32];
    let before =
        eval::report(&eval::predict(&state.params, &data, Policy::Dynamic).unwrap(), Policy::Dynamic, &cost, &hash)
            .unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&Checkpoint { config_hash: hash, state }, &path).unwrap();
    let ck = checkpoint::load(&path, Some(&hash)).unwrap();
    let after = eval::report(
        &eval::predict(&ck.state.params, &data, Policy::Dynamic).unwrap(),
        Policy::Dynamic,
        &cost,
        &ck.config_hash,
    )
    .unwrap();
    assert_eq!(before, after);
    // Truncation is caught, not decoded.
    let bytes = std::fs::read(&path).unwrap();
    assert!(checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(1, 8, dir.path());
    let cost = CostModel::default();
    for cfg in [
        TrainConfig { batch_size: 0, ..config(Policy::Dynamic) },
        TrainConfig { pretrain_steps: 0, ..config(Policy::Dynamic) },
        TrainConfig { lr: -1.0, ..config(Policy::Dynamic) },
        TrainConfig { milestones: vec![0.9, 0.6], ..config(Policy::Dynamic) },
    ] {
        let mut state = TrainState::new(init_params(&SMALL, 0, true).unwrap());
        assert!(pretrain(&mut state, &data, &cfg, &cost, |_| Ok(())).is_err());
    }
}

fn held_out_mask_loss(state: &TrainState, data: &Dataset) -> f64 {
    let rows = rung_losses(&state.params, data).unwrap();
    rows.iter().map(|r| r.mask.iter().sum::<f64>()).sum::<f64>() / rows.len() as f64
}

/// Pretraining lowers the all-rung mask loss on instances it never sees.
#[test]
fn pretraining_reduces_held_out_loss() {
    let dir = tempfile::tempdir().unwrap();
    let train = dataset(6, 10, &dir.path().join("train"));
    let held = dataset(2, 11, &dir.path().join("held"));
    for seed in 0..3 {
        let cfg = TrainConfig { seed, pretrain_steps: 200, batch_size: 2, warmup_steps: 20, ..config(Policy::Dynamic) };
        let mut state = TrainState::new(init_params(&SMALL, seed, false).unwrap());
        let start = held_out_mask_loss(&state, &held);
        pretrain(&mut state, &train, &cfg, &CostModel::default(), |_| Ok(())).unwrap();
        let end = held_out_mask_loss(&state, &held);
        println!("seed {seed}: held-out mask loss {start:.4} -> {end:.4}");
        assert!(end < start, "seed {seed}: {start} -> {end}");
    }
}
