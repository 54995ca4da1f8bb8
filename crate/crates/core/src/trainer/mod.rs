//! Pre-training loop, model container and linear-probe evaluation.

mod ablation;
mod config;
mod pretrain;
mod probe;
mod sceneset;

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use ablation::{arm_names, run_ablation, AblationResult, AblationRow, PairedComparison, RANDOM_INIT};
pub use config::{parse_kv, Arm, SceneSpec, TrainConfig};
pub use pretrain::{pretrain, pretrain_to_dir, TrainOutcome, CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE};
pub use probe::{accuracy_report, fit_linear_head, linear_probe, point_embeddings, LinearHead, ProbeReport};
pub use sceneset::{frame_stem, holdout_split, read_scene_set, scene_ids, write_scene_set};

use crate::blending::BlendParams;
use crate::embednet::{
    load_into, point_inputs, pool_backward, pool_regions, read_checkpoint, write_checkpoint, Activation, DenseStack,
    EmbeddingBank, PooledRegions, StackCache, StackGrads,
};
use crate::error::{CscError, Result};
use crate::projection::build_associations;
use crate::scenegen::Scene;
use crate::ExecMode;

/// Every trainable stack of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    /// Pixel features to `D`.
    pub net2d: DenseStack,
    /// Point inputs to `D`.
    pub net3d: DenseStack,
    pub blend: BlendParams,
}

impl Model {
    /// Xavier initialization from `cfg.seed`.
    pub fn init(cfg: &TrainConfig, pixel_features: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let hidden = vec![cfg.hidden_width; cfg.hidden_layers];
        let widths = |input: usize| -> Vec<usize> {
            let mut w = vec![input];
            w.extend(&hidden);
            w.push(cfg.embed_dim);
            w
        };
        let net2d = DenseStack::xavier(&widths(pixel_features), Activation::Relu, Activation::Identity, &mut rng)?;
        let net3d = DenseStack::xavier(
            &widths(crate::embednet::POINT_FEATURES),
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        let blend = BlendParams::xavier(cfg.embed_dim, cfg.proj_depth, Activation::Relu, &mut rng)?;
        Ok(Model { net2d, net3d, blend })
    }

    /// Checkpoint order: 2D net, 3D net, 2D projection, 3D projection, fusion.
    pub fn stacks(&self) -> [&DenseStack; 5] {
        let [p2, p3, f] = self.blend.stacks();
        [&self.net2d, &self.net3d, p2, p3, f]
    }

    pub fn stacks_mut(&mut self) -> [&mut DenseStack; 5] {
        let [p2, p3, f] = self.blend.stacks_mut();
        [&mut self.net2d, &mut self.net3d, p2, p3, f]
    }

    pub fn param_count(&self) -> usize {
        self.stacks().iter().map(|s| s.param_count()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.stacks().iter().flat_map(|s| s.params()).collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(CscError::shape("model parameters", self.param_count(), values.len()));
        }
        let mut offset = 0;
        for s in self.stacks_mut() {
            let n = s.param_count();
            s.set_params(&values[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(&self.stacks(), path)
    }

    /// Builds the architecture described by `cfg` and fills it from a
    /// checkpoint file.
    pub fn load(path: impl AsRef<Path>, cfg: &TrainConfig, pixel_features: usize) -> Result<Self> {
        let layers = read_checkpoint(path)?;
        let mut model = Model::init(cfg, pixel_features)?;
        load_into(&mut model.stacks_mut(), &layers)?;
        Ok(model)
    }
}

/// Network inputs of one keyframe, restricted to superpixels that received
/// at least one point. Region `q` owns rows `pixel_groups[q]` of
/// `pixel_inputs` and rows `point_groups[q]` of `point_inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedFrame {
    pub scene_id: u64,
    pub frame_index: u32,
    pub pixel_inputs: Array2<f64>,
    pub pixel_groups: Vec<Vec<u32>>,
    pub point_inputs: Array2<f64>,
    pub point_groups: Vec<Vec<u32>>,
    pub signs: Vec<u16>,
}

impl PreparedFrame {
    pub fn regions(&self) -> usize {
        self.signs.len()
    }
}

pub fn prepare_frame(scene: &Scene) -> PreparedFrame {
    let frame = &scene.frame;
    let table = build_associations(frame, ExecMode::Sequential);
    let fw = frame.feature_width as usize;
    let regions: Vec<_> = table.nonempty().map(|(_, sp)| sp).collect();
    let n_pix: usize = regions.iter().map(|sp| sp.pixels.len()).sum();
    let n_pts: usize = regions.iter().map(|sp| sp.points.len()).sum();

    let mut pixel_inputs = Array2::zeros((n_pix, fw));
    let mut pixel_groups = Vec::with_capacity(regions.len());
    let mut point_indices = Vec::with_capacity(n_pts);
    let mut point_groups = Vec::with_capacity(regions.len());
    let mut row = 0u32;
    for sp in &regions {
        let view = &frame.views[sp.camera as usize];
        let start = row;
        for &o in &sp.pixels {
            for (c, &v) in view.pixel_feature(o as usize, fw).iter().enumerate() {
                pixel_inputs[[row as usize, c]] = v as f64;
            }
            row += 1;
        }
        pixel_groups.push((start..row).collect());
        let start = point_indices.len() as u32;
        point_indices.extend_from_slice(&sp.points);
        point_groups.push((start..point_indices.len() as u32).collect());
    }
    PreparedFrame {
        scene_id: scene.truth.scene_id,
        frame_index: scene.truth.frame_index,
        pixel_inputs,
        pixel_groups,
        point_inputs: point_inputs(&frame.points, &point_indices),
        point_groups,
        signs: regions.iter().map(|sp| sp.class).collect(),
    }
}

/// Activations of one frame, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct FrameForward {
    pub bank: EmbeddingBank,
    pooled2d: PooledRegions,
    pooled3d: PooledRegions,
    cache2d: StackCache,
    cache3d: StackCache,
}

pub fn forward_frame(model: &Model, frame: &PreparedFrame) -> Result<FrameForward> {
    let (y2, cache2d) = model.net2d.forward(frame.pixel_inputs.view())?;
    let (y3, cache3d) = model.net3d.forward(frame.point_inputs.view())?;
    let pooled2d = pool_regions(y2.view(), &frame.pixel_groups)?;
    let pooled3d = pool_regions(y3.view(), &frame.point_groups)?;
    let bank = EmbeddingBank::from_pooled(&pooled2d, &pooled3d, frame.signs.clone())?;
    Ok(FrameForward { bank, pooled2d, pooled3d, cache2d, cache3d })
}

/// Parameter gradients of both networks given gradients on the frame's
/// embedding rows.
pub fn backward_frame(
    model: &Model,
    frame: &PreparedFrame,
    fwd: &FrameForward,
    grad2d: ArrayView2<f64>,
    grad3d: ArrayView2<f64>,
) -> Result<(StackGrads, StackGrads)> {
    let d2 = pool_backward(grad2d, &fwd.pooled2d, &frame.pixel_groups)?;
    let d3 = pool_backward(grad3d, &fwd.pooled3d, &frame.point_groups)?;
    let (g2, _) = model.net2d.backward(d2.view(), &fwd.cache2d)?;
    let (g3, _) = model.net3d.backward(d3.view(), &fwd.cache3d)?;
    Ok((g2, g3))
}
