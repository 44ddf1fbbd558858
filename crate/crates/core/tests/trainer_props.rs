mod common;

use std::collections::BTreeMap;

use common::{cases, randn, rng, toy_config};
use mstformer::data::{extract_all, generate, Clip, Dataset, GenConfig};
use mstformer::metrics::MetricReport;
use mstformer::model::{ModelConfig, ModelParams};
use mstformer::trainer::{
    evaluate, evaluate_clips, lr_at, sgd_step, train_clips, train_to_dir, OptimizerState, StepLog, TrainConfig,
};
use mstformer::{Error, Tensor};
use proptest::prelude::*;

fn toy_data() -> (Dataset, Vec<Clip>) {
    let ds = generate(&GenConfig {
        num_sequences: 12,
        image_size: 16,
        variant_fraction: 0.5,
        seed: 21,
        ..GenConfig::default()
    })
    .unwrap();
    let all: Vec<usize> = (0..ds.sequences.len()).collect();
    let clips = extract_all(&ds, &all, 6, 1).unwrap().clips;
    (ds, clips)
}

fn by_label(ds: &Dataset, clips: &[Clip], label: usize) -> Vec<Clip> {
    clips.iter().filter(|c| c.final_target(ds) == label).copied().collect()
}

fn mixed(ds: &Dataset, clips: &[Clip], n: usize) -> Vec<Clip> {
    let pos = by_label(ds, clips, 1);
    let neg = by_label(ds, clips, 0);
    pos.iter().take(n / 2).chain(neg.iter().take(n - n / 2)).copied().collect()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr_base: 0.01,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_on_eight_clips_logs_two_steps() {
    let (ds, clips) = toy_data();
    let train = mixed(&ds, &clips, 8);
    let out = train_clips(&toy_config(), &quick(1), &ds, &train, &[], |_| {}).unwrap();
    assert_eq!(out.losses.len(), 2);
    assert!(out.best.is_none());
    assert!(out.losses.iter().all(|s| s.loss.is_finite() && s.epoch == 1));
}

#[test]
fn equal_seeds_give_identical_runs() {
    let (ds, clips) = toy_data();
    let train = mixed(&ds, &clips, 8);
    let val = mixed(&ds, &clips[8..], 6);
    let cfg = toy_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs
        .iter()
        .map(|d| train_to_dir(&cfg, &quick(2), &ds, &train, &val, d.path()).unwrap())
        .collect();
    assert_eq!(runs[0].0.losses, runs[1].0.losses);
    for pick in [|f: &mstformer::trainer::RunFiles| f.final_checkpoint.clone(), |f: &mstformer::trainer::RunFiles| f.best_checkpoint.clone()] {
        let a = std::fs::read(pick(&runs[0].1)).unwrap();
        let b = std::fs::read(pick(&runs[1].1)).unwrap();
        assert_eq!(a, b);
    }

    let metrics = std::fs::read_to_string(&runs[0].1.metrics).unwrap();
    let reports: Vec<MetricReport> = metrics.lines().map(|l| MetricReport::from_line(l).unwrap()).collect();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r.split == "val" && r.threshold == "argmax"));
    let losses = std::fs::read_to_string(&runs[0].1.losses).unwrap();
    let logged: Vec<StepLog> = losses.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logged, runs[0].0.losses);

    let other = train_clips(&cfg, &TrainConfig { seed: 4, ..quick(2) }, &ds, &train, &val, |_| {}).unwrap();
    assert_ne!(other.losses, runs[0].0.losses);
}

#[test]
fn evaluation_contracts() {
    let (ds, clips) = toy_data();
    let cfg = toy_config();
    let params = ModelParams::init(&cfg, 0).unwrap();
    let negatives = by_label(&ds, &clips, 0);
    assert!(matches!(
        evaluate_clips(&params, &cfg, &ds, &negatives, 8),
        Err(Error::UndefinedMetric(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.mstp");
    params.save(&path).unwrap();
    let report = evaluate(&path, &cfg, &ds, &mixed(&ds, &clips, 10), "test").unwrap();
    assert_eq!(report.split, "test");
    assert_eq!(report.samples, 10);
    let wider = ModelConfig { d_model: 16, ..cfg };
    assert!(matches!(
        evaluate(&path, &wider, &ds, &clips, "test"),
        Err(Error::Param { .. })
    ));
}

#[test]
fn divergence_is_a_numeric_error() {
    let (ds, clips) = toy_data();
    let tcfg = TrainConfig { lr_base: 1e200, ..quick(3) };
    let err = train_clips(&toy_config(), &tcfg, &ds, &mixed(&ds, &clips, 8), &[], |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric { .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn schedule_is_continuous_at_the_boundary() {
    let cfg = TrainConfig { lr_base: 0.3, warmup_steps: Some(10), ..TrainConfig::default() };
    assert_eq!(lr_at(9, 50, &cfg).unwrap(), 0.3);
    assert_eq!(lr_at(10, 50, &cfg).unwrap(), 0.3);
    assert!(lr_at(50, 50, &cfg).unwrap().abs() < 1e-15);
    assert_eq!(TrainConfig::default().warmup_for(1000), 50);
}

fn one_param(values: Tensor) -> ModelParams {
    ModelParams::from_named([("w".to_string(), values)]).unwrap()
}

#[test]
fn momentum_examples() {
    let mut params = one_param(Tensor::zeros(&[1]));
    let grads = BTreeMap::from([("w".to_string(), Tensor::ones(&[1]))]);
    let mut state = OptimizerState::new(&params, 0.9);
    sgd_step(&mut params, &grads, &mut state, 0.1).unwrap();
    assert!((params.get("w").unwrap().data()[0] + 0.1).abs() < 1e-15);
    assert_eq!(state.velocity("w").unwrap().data(), &[1.0]);
    sgd_step(&mut params, &grads, &mut state, 0.1).unwrap();
    assert!((state.velocity("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    assert!((params.get("w").unwrap().data()[0] + 0.29).abs() < 1e-15);
    let before = params.clone();
    sgd_step(&mut params, &grads, &mut state, 0.0).unwrap();
    assert_eq!(params, before);
    assert!((state.velocity("w").unwrap().data()[0] - 2.71).abs() < 1e-15);
}

proptest! {
    #![proptest_config(cases(20))]

    #[test]
    fn zero_momentum_is_gradient_descent(seed: u64, n in 1usize..=5, lr in 0.0f64..1.0, steps in 1usize..4) {
        let mut r = rng(seed);
        let mut params = one_param(randn(&mut r, &[n]));
        let mut manual = params.get("w").unwrap().data().to_vec();
        let mut state = OptimizerState::new(&params, 0.0);
        for _ in 0..steps {
            let g = randn(&mut r, &[n]);
            for (m, gi) in manual.iter_mut().zip(g.data()) {
                *m -= lr * gi;
            }
            sgd_step(&mut params, &BTreeMap::from([("w".to_string(), g)]), &mut state, lr).unwrap();
        }
        prop_assert_eq!(params.get("w").unwrap().data(), manual.as_slice());
    }

    #[test]
    fn schedule_stays_in_range(base in 1e-5f64..1.0, warmup in 1usize..20, extra in 1usize..200) {
        let total = warmup + extra;
        let cfg = TrainConfig { lr_base: base, warmup_steps: Some(warmup), ..TrainConfig::default() };
        let mut prev = f64::INFINITY;
        for step in 0..=total {
            let lr = lr_at(step, total, &cfg).unwrap();
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            if step >= warmup {
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }
    }
}
