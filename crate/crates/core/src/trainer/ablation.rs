//! Paired-seed comparison of the training arms plus an untrained baseline.

use std::fmt::Write as _;

use super::{linear_probe, pretrain, Arm, TrainConfig};
use crate::error::Result;
use crate::scenegen::Scene;
use crate::ExecMode;

pub const RANDOM_INIT: &str = "random-init";

/// Arms in CSV order.
pub fn arm_names() -> Vec<String> {
    std::iter::once(RANDOM_INIT.to_string()).chain(Arm::ALL.iter().map(Arm::to_string)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub arm: String,
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
}

/// Paired difference `a - b` across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedComparison {
    pub better: String,
    pub worse: String,
    pub mean_diff: f64,
    /// Standard error of the mean paired difference.
    pub paired_se: f64,
    /// Whether the comparison requires `mean_diff > paired_se` rather than
    /// just `mean_diff >= 0`.
    pub needs_margin: bool,
}

impl PairedComparison {
    pub fn holds(&self) -> bool {
        if self.needs_margin {
            self.mean_diff > self.paired_se
        } else {
            self.mean_diff >= 0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub comparisons: Vec<PairedComparison>,
}

impl AblationResult {
    pub const CSV_HEADER: &'static str = "seed,arm,mean_accuracy,overall_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.seed, r.arm, r.mean_accuracy, r.overall_accuracy);
        }
        out
    }

    pub fn arm_mean(&self, arm: &str) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.arm == arm).map(|r| r.mean_accuracy).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for arm in arm_names() {
            let _ = writeln!(out, "{arm:<11} mean_accuracy={:.4}", self.arm_mean(&arm));
        }
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{} vs {}: diff={:+.4} paired_se={:.4} {} {}",
                c.better,
                c.worse,
                c.mean_diff,
                c.paired_se,
                if c.needs_margin { "(diff > se)" } else { "(diff >= 0)" },
                if c.holds() { "HOLDS" } else { "FAILS" }
            );
        }
        out
    }

    fn scores(&self, arm: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.arm == arm).map(|r| r.mean_accuracy).collect()
    }

    fn compare(&self, better: &str, worse: &str, needs_margin: bool) -> PairedComparison {
        let d: Vec<f64> = self.scores(better).iter().zip(self.scores(worse)).map(|(a, b)| a - b).collect();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = if d.len() > 1 { d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        PairedComparison {
            better: better.into(),
            worse: worse.into(),
            mean_diff: mean,
            paired_se: (var / n).sqrt(),
            needs_margin,
        }
    }
}

/// Trains every arm for each seed `base_seed..base_seed + seeds` and probes
/// the 3D network. Within a seed all arms share the initialization, the
/// batch order and the probe subsample.
pub fn run_ablation(
    scenes: &[Scene],
    cfg: &TrainConfig,
    base_seed: u64,
    seeds: u32,
    label_fraction: f64,
    mode: ExecMode,
) -> Result<AblationResult> {
    cfg.validate()?;
    let per_seed: Vec<Result<Vec<AblationRow>>> = mode.map_range(seeds as usize, |s| {
        let seed = base_seed + s as u64;
        let mut rows = Vec::with_capacity(Arm::ALL.len() + 1);
        let mut initial = None;
        for arm in Arm::ALL {
            let run_cfg = TrainConfig { seed, arm, ..cfg.clone() };
            let outcome = pretrain(scenes, &run_cfg, ExecMode::Sequential)?;
            if initial.is_none() {
                let r = linear_probe(&outcome.initial.net3d, scenes, label_fraction, cfg.probe_epochs, seed, ExecMode::Sequential)?;
                initial = Some(r.clone());
                rows.push(AblationRow {
                    seed,
                    arm: RANDOM_INIT.into(),
                    mean_accuracy: r.mean_accuracy,
                    overall_accuracy: r.overall_accuracy,
                });
            }
            let r = linear_probe(&outcome.model.net3d, scenes, label_fraction, cfg.probe_epochs, seed, ExecMode::Sequential)?;
            log::info!("seed {seed} arm {arm}: mean accuracy {:.4}", r.mean_accuracy);
            rows.push(AblationRow { seed, arm: arm.to_string(), mean_accuracy: r.mean_accuracy, overall_accuracy: r.overall_accuracy });
        }
        Ok(rows)
    });
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    let mut result = AblationResult { rows, comparisons: Vec::new() };
    result.comparisons = vec![
        result.compare("sp+mmpb", "sp", true),
        result.compare("sp", RANDOM_INIT, true),
        result.compare("sp+mmpb", "sp+rawpro", false),
    ];
    Ok(result)
}
