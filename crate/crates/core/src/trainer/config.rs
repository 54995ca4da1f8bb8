//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be known to the
//! consumer; unknown keys are a validation error.

use std::fmt;
use std::str::FromStr;

use crate::error::{CscError, Result};
use crate::losses::LossConfig;
use crate::scenegen::{SceneGeometry, SemanticOracleConfig};

/// Which objective a training run optimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Region contrastive loss only.
    Sp,
    /// Plus the prototype loss against normalized raw 3D prototypes.
    SpRawPro,
    /// Plus the prototype loss against blended prototypes.
    #[default]
    SpMmpb,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Sp, Arm::SpRawPro, Arm::SpMmpb];

    pub fn uses_prototypes(self) -> bool {
        self != Arm::Sp
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arm::Sp => "sp",
            Arm::SpRawPro => "sp+rawpro",
            Arm::SpMmpb => "sp+mmpb",
        })
    }
}

impl FromStr for Arm {
    type Err = CscError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sp" => Ok(Arm::Sp),
            "sp+rawpro" => Ok(Arm::SpRawPro),
            "sp+mmpb" => Ok(Arm::SpMmpb),
            other => Err(CscError::Config(format!("unknown arm '{other}' (expected sp, sp+rawpro or sp+mmpb)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u32,
    pub scenes_per_batch: usize,
    pub frames_per_scene: usize,
    /// Embedding width `D`.
    pub embed_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Affine layers per modality projection.
    pub proj_depth: usize,
    pub lr: f64,
    pub momentum: f64,
    pub loss: LossConfig,
    pub arm: Arm,
    /// Keep an exponential moving average of the prototypes across steps
    /// instead of recomputing them per batch.
    pub ema: bool,
    pub ema_momentum: f64,
    pub freeze_2d: bool,
    pub probe_fraction: f64,
    pub probe_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 20,
            scenes_per_batch: 4,
            frames_per_scene: 1,
            embed_dim: 32,
            hidden_width: 64,
            hidden_layers: 2,
            proj_depth: 1,
            lr: 3e-4,
            momentum: 0.9,
            loss: LossConfig::default(),
            arm: Arm::default(),
            ema: false,
            ema_momentum: 0.9,
            freeze_2d: false,
            probe_fraction: 0.01,
            probe_epochs: 300,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CscError::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CscError::Config(format!("invalid boolean '{value}' for {key}"))),
    }
}

/// Splits a config file into `(key, value)` pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CscError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(CscError::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "seed",
        "epochs",
        "scenes_per_batch",
        "frames_per_scene",
        "embed_dim",
        "hidden_width",
        "hidden_layers",
        "proj_depth",
        "lr",
        "momentum",
        "tau_sp",
        "tau_pro",
        "lambda",
        "arm",
        "ema",
        "ema_momentum",
        "freeze_2d",
        "probe_fraction",
        "probe_epochs",
    ];

    /// Applies one key. Returns `Ok(false)` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "scenes_per_batch" => self.scenes_per_batch = parse(key, value)?,
            "frames_per_scene" => self.frames_per_scene = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_width" => self.hidden_width = parse(key, value)?,
            "hidden_layers" => self.hidden_layers = parse(key, value)?,
            "proj_depth" => self.proj_depth = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "tau_sp" => self.loss.tau_sp = parse(key, value)?,
            "tau_pro" => self.loss.tau_pro = parse(key, value)?,
            "lambda" => self.loss.lambda = parse(key, value)?,
            "arm" => self.arm = value.parse()?,
            "ema" => self.ema = parse_bool(key, value)?,
            "ema_momentum" => self.ema_momentum = parse(key, value)?,
            "freeze_2d" => self.freeze_2d = parse_bool(key, value)?,
            "probe_fraction" => self.probe_fraction = parse(key, value)?,
            "probe_epochs" => self.probe_epochs = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(CscError::Config(format!("unknown config key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "seed = {}\nepochs = {}\nscenes_per_batch = {}\nframes_per_scene = {}\nembed_dim = {}\n\
             hidden_width = {}\nhidden_layers = {}\nproj_depth = {}\nlr = {}\nmomentum = {}\n\
             tau_sp = {}\ntau_pro = {}\nlambda = {}\narm = {}\nema = {}\nema_momentum = {}\n\
             freeze_2d = {}\nprobe_fraction = {}\nprobe_epochs = {}\n",
            self.seed,
            self.epochs,
            self.scenes_per_batch,
            self.frames_per_scene,
            self.embed_dim,
            self.hidden_width,
            self.hidden_layers,
            self.proj_depth,
            self.lr,
            self.momentum,
            self.loss.tau_sp,
            self.loss.tau_pro,
            self.loss.lambda,
            self.arm,
            self.ema,
            self.ema_momentum,
            self.freeze_2d,
            self.probe_fraction,
            self.probe_epochs,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CscError::Config(m));
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err(format!("lr={} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum={} must be in [0, 1)", self.momentum));
        }
        if self.scenes_per_batch < 2 {
            return err("scenes_per_batch must be at least 2 so prototypes span scenes".into());
        }
        if self.frames_per_scene == 0 {
            return err("frames_per_scene must be at least 1".into());
        }
        if self.embed_dim == 0 || self.hidden_width == 0 {
            return err("embed_dim and hidden_width must be positive".into());
        }
        if self.proj_depth == 0 {
            return err("proj_depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return err(format!("ema_momentum={} must be in [0, 1)", self.ema_momentum));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction <= 1.0) {
            return err(format!("probe_fraction={} must be in (0, 1]", self.probe_fraction));
        }
        if self.probe_epochs == 0 {
            return err("probe_epochs must be at least 1".into());
        }
        self.loss.validate()
    }
}

/// Scene generation settings: the semantic oracle plus geometry.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneSpec {
    pub oracle: SemanticOracleConfig,
    pub geometry: SceneGeometry,
    pub frames_per_scene: u32,
}

impl SceneSpec {
    pub fn new(oracle: SemanticOracleConfig, geometry: SceneGeometry) -> Self {
        SceneSpec { oracle, geometry, frames_per_scene: 1 }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let (o, g) = (&mut self.oracle, &mut self.geometry);
        match key {
            "num_classes" => o.num_classes = parse(key, value)?,
            "objects_per_scene" => o.objects_per_scene = parse(key, value)?,
            "oversegment_factor" => o.oversegment_factor = parse(key, value)?,
            "noise" => o.noise = parse(key, value)?,
            "extent" => g.extent = parse(key, value)?,
            "num_points" => g.num_points = parse(key, value)?,
            "num_cameras" => g.num_cameras = parse(key, value)?,
            "height" => g.height = parse(key, value)?,
            "width" => g.width = parse(key, value)?,
            "camera_height" => g.camera_height = parse(key, value)?,
            "fov_deg" => g.fov_deg = parse(key, value)?,
            "frames_per_scene" => self.frames_per_scene = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut spec = SceneSpec { frames_per_scene: 1, ..Default::default() };
        for (k, v) in parse_kv(text)? {
            if !spec.set(&k, &v)? {
                return Err(CscError::Config(format!("unknown scene key '{k}'")));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.geometry.validate()?;
        if self.frames_per_scene == 0 {
            return Err(CscError::Config("frames_per_scene must be at least 1".into()));
        }
        Ok(())
    }
}
