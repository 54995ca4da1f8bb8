mod common;

use csc_core::trainer::{pretrain, Arm, TrainConfig};
use csc_core::ExecMode;

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let col = lines.next().unwrap().split(',').position(|h| h == name).unwrap();
    lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect()
}

fn moving_average(v: &[f64], w: usize) -> Vec<f64> {
    v.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn total_loss_trends_down_over_fifty_steps() {
    let scenes = common::scenes(5, 16, 1024);
    let cfg = TrainConfig { epochs: 13, ..TrainConfig::default() };
    let outcome = pretrain(&scenes, &cfg, ExecMode::Parallel).unwrap();
    let total = column(&outcome.metrics_csv, "total");
    assert!(total.len() >= 50);
    let avg = moving_average(&total[..50], 10);
    assert!(avg.last().unwrap() < avg.first().unwrap(), "moving average {avg:?}");
}

#[test]
fn gate_opens_after_lambda_for_every_prototype_arm() {
    let scenes = common::scenes(9, 6, 512);
    for arm in [Arm::SpRawPro, Arm::SpMmpb] {
        let mut cfg = TrainConfig { epochs: 4, arm, ..TrainConfig::default() };
        cfg.loss.lambda = 2;
        let outcome = pretrain(&scenes, &cfg, ExecMode::Sequential).unwrap();
        let epoch = column(&outcome.metrics_csv, "epoch");
        let gate = column(&outcome.metrics_csv, "gate");
        let pro = column(&outcome.metrics_csv, "loss_pro");
        for ((e, g), p) in epoch.iter().zip(&gate).zip(&pro) {
            assert_eq!(*g == 1.0, *e > 2.0);
            assert_eq!(*p > 0.0, *g == 1.0);
        }
    }
}

#[test]
fn execution_mode_does_not_change_results() {
    let scenes = common::scenes(13, 6, 512);
    let cfg = TrainConfig { epochs: 7, ..TrainConfig::default() };
    let a = pretrain(&scenes, &cfg, ExecMode::Sequential).unwrap();
    let b = pretrain(&scenes, &cfg, ExecMode::Parallel).unwrap();
    assert_eq!(a.metrics_csv, b.metrics_csv);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn different_seeds_differ() {
    let scenes = common::scenes(13, 6, 512);
    let a = pretrain(&scenes, &TrainConfig { epochs: 2, seed: 1, ..TrainConfig::default() }, ExecMode::Parallel).unwrap();
    let b = pretrain(&scenes, &TrainConfig { epochs: 2, seed: 2, ..TrainConfig::default() }, ExecMode::Parallel).unwrap();
    assert_ne!(a.metrics_csv, b.metrics_csv);
}
