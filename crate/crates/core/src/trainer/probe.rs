//! Linear-probe evaluation of frozen point embeddings.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

use super::sceneset::holdout_split;
use crate::embednet::{point_inputs, DenseStack};
use crate::error::{CscError, Result};
use crate::scenegen::{seeded_shuffle, Scene};
use crate::ExecMode;

/// Stream reserved for the label subsample.
const SUBSAMPLE_STREAM: u64 = 7 << 32;
const PROBE_LR: f64 = 0.5;
const PROBE_MOMENTUM: f64 = 0.9;
const PROBE_L2: f64 = 1e-4;

/// Embeddings of every point of `scene`, one row per point.
pub fn point_embeddings(net3d: &DenseStack, scene: &Scene) -> Result<Array2<f64>> {
    let all: Vec<u32> = (0..scene.frame.points.len() as u32).collect();
    net3d.infer(point_inputs(&scene.frame.points, &all).view())
}

/// Standardization followed by an affine map to class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// `T × D`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearHead {
    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) / &self.scale
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<u16> {
        let scores = self.standardize(x).dot(&self.weight.t()) + &self.bias;
        scores
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// Class-balanced softmax regression by full-batch gradient descent with
/// momentum and a small L2 penalty.
pub fn fit_linear_head(x: &Array2<f64>, y: &[u16], num_classes: usize, epochs: usize) -> Result<LinearHead> {
    let (n, d) = x.dim();
    if n == 0 || n != y.len() {
        return Err(CscError::Config(format!("probe needs matching non-empty data, got {n} rows and {} labels", y.len())));
    }
    if let Some(&c) = y.iter().find(|&&c| c as usize >= num_classes) {
        return Err(CscError::Config(format!("label {c} outside [0, {num_classes})")));
    }
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let mut head = LinearHead { mean, scale, weight: Array2::zeros((num_classes, d)), bias: Array1::zeros(num_classes) };
    let xs = head.standardize(x);

    let mut counts = vec![0usize; num_classes];
    for &c in y {
        counts[c as usize] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let sample_w: Vec<f64> = y.iter().map(|&c| 1.0 / (present * counts[c as usize] as f64)).collect();

    let mut vw = Array2::<f64>::zeros((num_classes, d));
    let mut vb = Array1::<f64>::zeros(num_classes);
    for _ in 0..epochs {
        let mut g = xs.dot(&head.weight.t()) + &head.bias;
        for (i, mut row) in g.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row /= z;
            row[y[i] as usize] -= 1.0;
            row *= sample_w[i];
        }
        let gw = g.t().dot(&xs) + &head.weight * PROBE_L2;
        let gb = g.sum_axis(Axis(0));
        vw = vw * PROBE_MOMENTUM + gw;
        vb = vb * PROBE_MOMENTUM + gb;
        head.weight.scaled_add(-PROBE_LR, &vw);
        head.bias.scaled_add(-PROBE_LR, &vb);
    }
    Ok(head)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub label_fraction: f64,
    pub train_points: usize,
    pub test_points: usize,
    /// Held-out accuracy per class; `None` for classes absent from the
    /// held-out scenes.
    pub per_class: Vec<Option<f64>>,
    /// Mean of the per-class accuracies that are present.
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
}

impl ProbeReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label_fraction={}", self.label_fraction);
        let _ = writeln!(out, "train_points={}", self.train_points);
        let _ = writeln!(out, "test_points={}", self.test_points);
        let _ = writeln!(out, "mean_accuracy={:.6}", self.mean_accuracy);
        let _ = writeln!(out, "overall_accuracy={:.6}", self.overall_accuracy);
        for (c, a) in self.per_class.iter().enumerate() {
            match a {
                Some(a) => {
                    let _ = writeln!(out, "class_{c}={a:.6}");
                }
                None => {
                    let _ = writeln!(out, "class_{c}=absent");
                }
            }
        }
        out
    }
}

pub fn accuracy_report(pred: &[u16], truth: &[u16], num_classes: usize, label_fraction: f64, train_points: usize) -> ProbeReport {
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        tot[t as usize] += 1;
        if p == t {
            hit[t as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> =
        (0..num_classes).map(|c| (tot[c] > 0).then(|| hit[c] as f64 / tot[c] as f64)).collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean_accuracy = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let overall_accuracy = hit.iter().sum::<usize>() as f64 / truth.len().max(1) as f64;
    ProbeReport { label_fraction, train_points, test_points: truth.len(), per_class, mean_accuracy, overall_accuracy }
}

/// Trains a linear head on a seeded `label_fraction` subsample of the points
/// of the training scenes and reports accuracy on the held-out scenes (the
/// last quarter of scene ids).
pub fn linear_probe(
    net3d: &DenseStack,
    scenes: &[Scene],
    label_fraction: f64,
    epochs: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<ProbeReport> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(CscError::Config(format!("label fraction {label_fraction} must be in (0, 1]")));
    }
    let num_classes = scenes.first().map_or(0, |s| s.frame.num_classes as usize);
    let (train_ids, _) = holdout_split(scenes)?;
    let (train, test): (Vec<&Scene>, Vec<&Scene>) =
        scenes.iter().partition(|s| train_ids.binary_search(&s.truth.scene_id).is_ok());

    let mut pool: Vec<(usize, u32)> = train
        .iter()
        .enumerate()
        .flat_map(|(k, s)| (0..s.frame.points.len() as u32).map(move |i| (k, i)))
        .collect();
    seeded_shuffle(&mut pool, seed, SUBSAMPLE_STREAM);
    let take = (label_fraction * pool.len() as f64).round() as usize;
    if take == 0 {
        return Err(CscError::Config(format!(
            "label fraction {label_fraction} of {} training points selects nothing",
            pool.len()
        )));
    }
    pool.truncate(take);
    pool.sort_unstable();

    let d = net3d.output_width();
    let mut x = Array2::zeros((take, d));
    let mut y = Vec::with_capacity(take);
    let mut row = 0;
    for (k, s) in train.iter().enumerate() {
        let idx: Vec<u32> = pool.iter().filter(|(kk, _)| *kk == k).map(|&(_, i)| i).collect();
        if idx.is_empty() {
            continue;
        }
        let emb = net3d.infer(point_inputs(&s.frame.points, &idx).view())?;
        x.slice_mut(ndarray::s![row..row + idx.len(), ..]).assign(&emb);
        y.extend(idx.iter().map(|&i| s.truth.point_labels[i as usize]));
        row += idx.len();
    }
    let head = fit_linear_head(&x, &y, num_classes, epochs)?;

    let per_scene: Vec<Result<(Vec<u16>, Vec<u16>)>> = mode.map(&test, |s| {
        let emb = point_embeddings(net3d, s)?;
        Ok((head.predict(&emb), s.truth.point_labels.clone()))
    });
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for r in per_scene {
        let (p, t) = r?;
        pred.extend(p);
        truth.extend(t);
    }
    Ok(accuracy_report(&pred, &truth, num_classes, label_fraction, take))
}
