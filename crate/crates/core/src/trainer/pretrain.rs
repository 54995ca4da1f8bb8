use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::s;

use super::{backward_frame, forward_frame, prepare_frame, Arm, Model, PreparedFrame, TrainConfig};
use crate::blending::{blend, blend_backward, raw_mix, BlendCache, BlendGrads};
use crate::embednet::{EmbeddingBank, StackGrads};
use crate::error::{CscError, Result};
use crate::losses::{loss_pro, loss_sp, total_loss, LossReport};
use crate::protobank::{build_prototypes, ema_update, PrototypeBank};
use crate::scenegen::{seeded_shuffle, Scene};
use crate::ExecMode;

pub const CHECKPOINT_FILE: &str = "checkpoint.cscw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";

/// Stream reserved for the batch order; the epoch number is added to it.
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: Model,
    pub model: Model,
    /// Header plus one row per optimizer step.
    pub metrics_csv: String,
    pub steps: u64,
    pub skipped_batches: u64,
}

/// Groups prepared frames by scene, scenes ascending.
fn by_scene(frames: Vec<PreparedFrame>) -> Vec<Vec<PreparedFrame>> {
    let mut map: BTreeMap<u64, Vec<PreparedFrame>> = BTreeMap::new();
    for f in frames {
        map.entry(f.scene_id).or_default().push(f);
    }
    map.into_values().collect()
}

fn batches(scene_count: usize, cfg: &TrainConfig, epoch: u32) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scene_count).collect();
    seeded_shuffle(&mut order, cfg.seed, SHUFFLE_STREAM + epoch as u64);
    order
        .chunks(cfg.scenes_per_batch)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

enum ProtoPath {
    Blended(BlendCache),
    Raw,
}

struct StepResult {
    report: LossReport,
    grads: Vec<f64>,
}

/// One forward/backward pass over a batch. Returns `None` for a degenerate
/// batch.
fn step(
    model: &Model,
    frames: &[&PreparedFrame],
    epoch: u32,
    cfg: &TrainConfig,
    ema_state: &mut Option<PrototypeBank>,
    mode: ExecMode,
) -> Result<Option<StepResult>> {
    let forwards: Vec<_> = mode.map(frames, |f| forward_frame(model, f)).into_iter().collect::<Result<_>>()?;
    let banks: Vec<EmbeddingBank> = forwards.iter().map(|f| f.bank.clone()).collect();
    let bank = EmbeddingBank::concat(&banks)?;

    let sp = match loss_sp(&bank, cfg.loss.tau_sp) {
        Ok(sp) => sp,
        Err(CscError::DegenerateBatch { valid }) => {
            log::warn!("epoch {epoch}: skipping batch with {valid} valid regions");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };

    let mut loss_cfg = cfg.loss.clone();
    if !cfg.arm.uses_prototypes() {
        loss_cfg.lambda = u32::MAX;
    }
    let mut proto_path = None;
    let total = total_loss(
        epoch,
        sp,
        || {
            let fresh = build_prototypes(&banks)?;
            let protos = match ema_state.take() {
                Some(old) if cfg.ema => ema_update(&old, &fresh, cfg.ema_momentum)?,
                _ => fresh,
            };
            if cfg.ema {
                *ema_state = Some(protos.clone());
            }
            let mixed = match cfg.arm {
                Arm::SpMmpb => {
                    let (mixed, cache) = blend(&protos, &model.blend)?;
                    proto_path = Some(ProtoPath::Blended(cache));
                    mixed
                }
                _ => {
                    proto_path = Some(ProtoPath::Raw);
                    raw_mix(&protos)?
                }
            };
            loss_pro(&bank, &mixed, loss_cfg.tau_pro)
        },
        &loss_cfg,
    )?;
    if !total.report.total.is_finite() {
        return Err(CscError::Training(format!("non-finite loss at epoch {epoch}")));
    }

    let mut offsets = Vec::with_capacity(frames.len());
    let mut start = 0;
    for b in &banks {
        offsets.push(start);
        start += b.len();
    }
    let jobs: Vec<usize> = (0..frames.len()).collect();
    let frame_grads: Vec<(StackGrads, StackGrads)> = mode
        .map(&jobs, |&i| {
            let rows = s![offsets[i]..offsets[i] + banks[i].len(), ..];
            backward_frame(
                model,
                frames[i],
                &forwards[i],
                total.grad2d.slice(rows),
                total.grad3d.slice(rows),
            )
        })
        .into_iter()
        .collect::<Result<_>>()?;

    // Fixed reduction order: frames ascending.
    let mut g2 = StackGrads::zeros_like(&model.net2d);
    let mut g3 = StackGrads::zeros_like(&model.net3d);
    for (a, b) in &frame_grads {
        g2.add_assign(a);
        g3.add_assign(b);
    }
    let gb = match (&proto_path, &total.grad_mix) {
        (Some(ProtoPath::Blended(cache)), Some(gm)) => blend_backward(gm.view(), cache, &model.blend)?,
        _ => BlendGrads::zeros_like(&model.blend),
    };

    let mut grads = if cfg.freeze_2d { vec![0.0; model.net2d.param_count()] } else { g2.flatten() };
    grads.extend(g3.flatten());
    grads.extend(gb.flatten());
    Ok(Some(StepResult { report: total.report, grads }))
}

/// Runs the full schedule. Frames of the same scene always share a batch.
pub fn pretrain(scenes: &[Scene], cfg: &TrainConfig, mode: ExecMode) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some(first) = scenes.first() else {
        return Err(CscError::Config("empty scene set".into()));
    };
    let pixel_features = first.frame.feature_width as usize;
    if let Some(s) = scenes.iter().find(|s| s.frame.feature_width as usize != pixel_features) {
        return Err(CscError::Config(format!("scene {} has a different pixel feature width", s.truth.scene_id)));
    }
    let frames = mode.map(scenes, prepare_frame);
    let mut grouped = by_scene(frames);
    for g in &mut grouped {
        g.sort_by_key(|f| f.frame_index);
        g.truncate(cfg.frames_per_scene);
    }
    if grouped.len() < cfg.scenes_per_batch {
        return Err(CscError::Config(format!(
            "{} scenes available, scenes_per_batch is {}",
            grouped.len(),
            cfg.scenes_per_batch
        )));
    }

    let initial = Model::init(cfg, pixel_features)?;
    let mut model = initial.clone();
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let per_epoch = batches(grouped.len(), cfg, 1).len();
    let total_slots = (per_epoch * cfg.epochs as usize) as f64;

    let mut csv = String::from(LossReport::CSV_HEADER);
    csv.push('\n');
    let mut ema_state = None;
    let (mut steps, mut skipped, mut slot) = (0u64, 0u64, 0usize);
    for epoch in 1..=cfg.epochs {
        let mut epoch_steps = 0;
        let mut epoch_loss = 0.0;
        for batch in batches(grouped.len(), cfg, epoch) {
            let lr = 0.5 * cfg.lr * (1.0 + (PI * slot as f64 / total_slots).cos());
            slot += 1;
            let frames: Vec<&PreparedFrame> = batch.iter().flat_map(|&i| grouped[i].iter()).collect();
            let Some(res) = step(&model, &frames, epoch, cfg, &mut ema_state, mode)? else {
                skipped += 1;
                continue;
            };
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&res.grads) {
                *v = cfg.momentum * *v + g;
                *p -= lr * *v;
            }
            model.set_params(&params)?;
            steps += 1;
            epoch_steps += 1;
            epoch_loss += res.report.total;
            csv.push_str(&res.report.csv_row(steps, epoch));
            csv.push('\n');
        }
        if epoch_steps == 0 {
            return Err(CscError::Training(format!("every batch of epoch {epoch} was degenerate")));
        }
        log::info!("epoch {epoch}: {epoch_steps} steps, mean loss {:.6}", epoch_loss / epoch_steps as f64);
    }
    Ok(TrainOutcome { initial, model, metrics_csv: csv, steps, skipped_batches: skipped })
}

/// [`pretrain`], then writes the checkpoint, metrics and effective config
/// into `out`.
pub fn pretrain_to_dir(scenes: &[Scene], cfg: &TrainConfig, mode: ExecMode, out: impl AsRef<Path>) -> Result<TrainOutcome> {
    let outcome = pretrain(scenes, cfg, mode)?;
    let out = out.as_ref();
    fs::create_dir_all(out)?;
    outcome.model.save(out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(METRICS_FILE), &outcome.metrics_csv)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_kv_text())?;
    Ok(outcome)
}
