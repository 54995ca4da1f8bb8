//! Command-line front end: `gen-scenes`, `pretrain`, `gradcheck`, `probe`
//! and `ablate`.
//!
//! Exit codes: 0 on success, 1 on validation errors (bad flags, bad config,
//! malformed input files), 2 on runtime errors. Files are only written below
//! the `--out` directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{CscError, Result};
use crate::gradcheck::{gradcheck_with, GradcheckOptions};
use crate::scenegen::generate_set;
use crate::trainer::{
    linear_probe, parse_kv, pretrain_to_dir, read_scene_set, run_ablation, write_scene_set, Arm, Model, SceneSpec,
    TrainConfig, CHECKPOINT_FILE, CONFIG_FILE,
};
use crate::ExecMode;

pub const PROBE_FILE: &str = "probe.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.txt";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "csc", version, about = "Cross-scene semantic consistency pre-training")]
pub struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic scene set.
    GenScenes(GenScenesArgs),
    /// Pre-train the embedding networks on a scene set.
    Pretrain(PretrainArgs),
    /// Check every analytic gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Linear-probe a checkpoint on the held-out scenes.
    Probe(ProbeArgs),
    /// Train every arm over several seeds and compare probe accuracy.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of scenes; overrides `num_scenes` in the config.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub arm: Option<Arm>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::gradcheck::DEFAULT_INSTANCES)]
    pub instances: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Checkpoint file, or a pretrain output directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scenes: PathBuf,
    /// Defaults to the `config.txt` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Seed of the label subsample; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value_t = 10)]
    pub seeds: u32,
    /// First training seed; also the generation seed when `--scenes` is absent.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Existing scene set; otherwise scenes are generated in memory.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training and scene settings read from one `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scenes: SceneSpec,
    pub num_scenes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            scenes: SceneSpec { frames_per_scene: 1, ..SceneSpec::default() },
            num_scenes: 32,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            let known = match k.as_str() {
                "num_scenes" => {
                    cfg.num_scenes = v
                        .parse()
                        .map_err(|_| CscError::Config(format!("invalid value '{v}' for num_scenes")))?;
                    true
                }
                "frames_per_scene" => cfg.train.set(&k, &v)? && cfg.scenes.set(&k, &v)?,
                _ => cfg.train.set(&k, &v)? || cfg.scenes.set(&k, &v)?,
            };
            if !known {
                return Err(CscError::Config(format!("unknown config key '{k}'")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CscError::Config(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text)
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.scenes.validate()?;
        if self.num_scenes == 0 {
            return Err(CscError::Config("num_scenes must be at least 1".into()));
        }
        Ok(())
    }
}

fn mode(cli: &Cli) -> ExecMode {
    if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

fn gen_scenes(args: &GenScenesArgs, mode: ExecMode) -> Result<()> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let count = args.count.unwrap_or(cfg.num_scenes);
    if count == 0 {
        return Err(CscError::Config("--count must be at least 1".into()));
    }
    cfg.validate()?;
    let spec = &cfg.scenes;
    let scenes = generate_set(args.seed, count, spec.frames_per_scene, &spec.oracle, &spec.geometry, mode)?;
    let paths = write_scene_set(&args.out, &scenes)?;
    println!("wrote {} frames to {}", paths.len(), args.out.display());
    Ok(())
}

fn pretrain_cmd(args: &PretrainArgs, mode: ExecMode) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(a) = args.arm {
        cfg.train.arm = a;
    }
    cfg.train.validate()?;
    let scenes = read_scene_set(&args.scenes)?;
    let outcome = pretrain_to_dir(&scenes, &cfg.train, mode, &args.out)?;
    println!(
        "trained {} steps ({} degenerate batches skipped); wrote {}",
        outcome.steps,
        outcome.skipped_batches,
        args.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs, mode: ExecMode) -> Result<bool> {
    if args.instances == 0 {
        return Err(CscError::Config("--instances must be at least 1".into()));
    }
    let report = gradcheck_with(args.seed, &GradcheckOptions { instances: args.instances, corrupt: None }, mode);
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(GRADCHECK_FILE), &text)?;
    }
    Ok(report.passed())
}

fn probe_cmd(args: &ProbeArgs, mode: ExecMode) -> Result<()> {
    let (ckpt, dir) = if args.ckpt.is_dir() {
        (args.ckpt.join(CHECKPOINT_FILE), args.ckpt.clone())
    } else {
        (args.ckpt.clone(), args.ckpt.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let config_path = args.config.clone().or_else(|| Some(dir.join(CONFIG_FILE)).filter(|p| p.exists()));
    let mut cfg = RunConfig::load(config_path.as_deref())?;
    if let Some(f) = args.fraction {
        cfg.train.probe_fraction = f;
    }
    cfg.train.validate()?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let scenes = read_scene_set(&args.scenes)?;
    let pixel_features = scenes[0].frame.feature_width as usize;
    let model = Model::load(&ckpt, &cfg.train, pixel_features)?;
    let report = linear_probe(&model.net3d, &scenes, cfg.train.probe_fraction, cfg.train.probe_epochs, seed, mode)?;
    let text = report.to_text();
    print!("{text}");
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(PROBE_FILE), text)?;
    Ok(())
}

fn ablate_cmd(args: &AblateArgs, mode: ExecMode) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(f) = args.fraction {
        cfg.train.probe_fraction = f;
    }
    if let Some(c) = args.count {
        cfg.num_scenes = c;
    }
    if args.seeds == 0 {
        return Err(CscError::Config("--seeds must be at least 1".into()));
    }
    cfg.validate()?;
    let base = args.seed.unwrap_or(cfg.train.seed);
    let scenes = match &args.scenes {
        Some(dir) => read_scene_set(dir)?,
        None => {
            let s = &cfg.scenes;
            generate_set(base, cfg.num_scenes, s.frames_per_scene, &s.oracle, &s.geometry, mode)?
        }
    };
    let result = run_ablation(&scenes, &cfg.train, base, args.seeds, cfg.train.probe_fraction, mode)?;
    let summary = result.summary();
    print!("{summary}");
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(ABLATION_FILE), result.to_csv())?;
    fs::write(args.out.join(SUMMARY_FILE), summary)?;
    Ok(())
}

fn exit_code(err: &CscError) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mode = mode(&cli);
    let result = match &cli.command {
        Command::GenScenes(a) => gen_scenes(a, mode),
        Command::Pretrain(a) => pretrain_cmd(a, mode),
        Command::Gradcheck(a) => match gradcheck_cmd(a, mode) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return 2;
            }
            Err(e) => Err(e),
        },
        Command::Probe(a) => probe_cmd(a, mode),
        Command::Ablate(a) => ablate_cmd(a, mode),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_routes_keys() {
        let cfg = RunConfig::parse("epochs = 2\nnum_points = 100\nnum_scenes = 6\nframes_per_scene = 2\n").unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.scenes.geometry.num_points, 100);
        assert_eq!(cfg.num_scenes, 6);
        assert_eq!((cfg.train.frames_per_scene, cfg.scenes.frames_per_scene), (2, 2));
        assert!(RunConfig::parse("nonsense = 1").is_err());
    }

    #[test]
    fn parse_errors_exit_one() {
        assert_eq!(run(["csc", "pretrain", "--bogus"]), 1);
        assert_eq!(run(["csc"]), 1);
        assert_eq!(run(["csc", "ablate", "--out", "x", "--arm", "sp"]), 1);
        assert_eq!(run(["csc", "pretrain", "--scenes", "s", "--out", "o", "--arm", "all"]), 1);
    }
}
