//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines show up in `cargo test` output.
//! Criterion 6 is a directional research claim; its line is printed either
//! way but does not set the exit status.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::time::{Duration, Instant};

use ndarray::Array2;

use csc_core::embednet::EmbeddingBank;
use csc_core::gradcheck::{gradcheck_with, Component, GradcheckOptions};
use csc_core::losses::{loss_pro, loss_sp};
use csc_core::projection::build_associations;
use csc_core::protobank::{build_prototypes, PrototypeBank};
use csc_core::scenegen::{
    decode_labels, decode_scene, encode_labels, encode_scene, generate_set, read_scene, write_scene, Scene,
    SceneGeometry, SemanticOracleConfig,
};
use csc_core::trainer::{
    forward_frame, prepare_frame, pretrain, pretrain_to_dir, run_ablation, Model, TrainConfig, CHECKPOINT_FILE,
    METRICS_FILE,
};
use csc_core::ExecMode;

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const CLOSED_FORM_TOL: f64 = 1e-9;
const PROTO_TOL: f64 = 1e-12;
const LAMBDA: u32 = 5;
const DESK_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SEEDS: u32 = 10;
const ABLATION_FRACTION: f64 = 0.01;
const DESK_SCENES: usize = 32;
const DESK_SCENE_SEED: u64 = 1;

/// Criteria whose outcome is reported but does not fail the run.
const NON_GATING: &[u32] = &[6];

struct Verdict {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn unit(d: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = 1.0;
    v
}

fn rows(r: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((r.len(), r[0].len()), |(i, j)| r[i][j])
}

fn bank_of(f2d: &[Vec<f64>], f3d: &[Vec<f64>], signs: Vec<u16>) -> EmbeddingBank {
    let q = signs.len();
    EmbeddingBank::new(rows(f2d), rows(f3d), vec![true; q], vec![true; q], signs).unwrap()
}

fn protos_with_mix(mix: Array2<f64>) -> PrototypeBank {
    let c = mix.nrows();
    PrototypeBank {
        classes: (0..c as u16).collect(),
        p2d: mix.clone(),
        p3d: mix.clone(),
        count2d: vec![1; c],
        count3d: vec![1; c],
        projected2d: None,
        projected3d: None,
        mix: Some(mix),
    }
}

fn criterion_gradcheck() -> Verdict {
    let start = Instant::now();
    let report = gradcheck_with(0, &GradcheckOptions { instances: GRAD_INSTANCES, corrupt: None }, ExecMode::Parallel);
    let elapsed = start.elapsed();
    let mut pass = elapsed < GRAD_BUDGET;
    let mut detail = String::new();
    for c in Component::ALL {
        let r = report.get(c).expect("every component reported");
        pass &= r.errors.is_empty() && r.instances >= GRAD_INSTANCES && r.checked > 0 && r.max_rel_err < GRAD_TOL;
        let _ = write!(detail, "{}={:.2e} ", c.name(), r.max_rel_err);
    }
    let _ = write!(detail, "({GRAD_INSTANCES} instances each, {:.1}s)", elapsed.as_secs_f64());
    Verdict { id: 1, name: "gradient exactness", pass, detail }
}

fn criterion_closed_forms() -> Verdict {
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());

    // Uniform similarities: every row identical.
    for q in [2usize, 5, 17] {
        let same = vec![unit(4, 0); q];
        let sp = loss_sp(&bank_of(&same, &same, vec![0; q]), 0.07).unwrap();
        check(sp.value, q as f64 * (q as f64).ln());
    }
    for c in [2usize, 8] {
        let mix = rows(&vec![unit(4, 1); c]);
        let signs: Vec<u16> = (0..6).map(|i| (i % c) as u16).collect();
        let f = vec![unit(4, 2); 6];
        let pro = loss_pro(&bank_of(&f, &f, signs), &protos_with_mix(mix), 1.0).unwrap();
        check(pro.value, (c as f64).ln());
    }

    // Orthonormal positives.
    let tau = 0.07;
    let basis: Vec<Vec<f64>> = (0..4).map(|k| unit(4, k)).collect();
    let sp = loss_sp(&bank_of(&basis, &basis, vec![0; 4]), tau).unwrap();
    check(sp.value, 4.0 * (3.0 * (-1.0 / tau).exp()).ln_1p());

    let c = 8;
    let basis: Vec<Vec<f64>> = (0..c).map(|k| unit(c, k)).collect();
    let signs: Vec<u16> = (0..c as u16).collect();
    let pro = loss_pro(&bank_of(&basis, &basis, signs), &protos_with_mix(rows(&basis)), 1.0).unwrap();
    let expected = (7.0 * (-1.0f64).exp()).ln_1p();
    check(pro.value, expected);

    Verdict {
        id: 2,
        name: "closed-form loss oracles",
        pass: worst < CLOSED_FORM_TOL,
        detail: format!("max abs err {worst:.2e}; log(1+7/e) = {expected:.7}"),
    }
}

fn criterion_prototypes() -> Verdict {
    let scenes = common::scenes(3, 3, 2048);
    let cfg = TrainConfig::default();
    let model = Model::init(&cfg, scenes[0].frame.feature_width as usize).unwrap();
    let banks: Vec<EmbeddingBank> = scenes.iter().map(|s| forward_frame(&model, &prepare_frame(s)).unwrap().bank).collect();
    let got = build_prototypes(&banks).unwrap();
    let want = common::brute_force_prototypes(&banks);

    let mut pass = got.classes == want.keys().copied().collect::<Vec<_>>();
    let mut worst = 0.0f64;
    for (i, (class, o)) in want.iter().enumerate().take(got.len()) {
        pass &= got.classes[i] == *class && got.count2d[i] == o.n2d && got.count3d[i] == o.n3d;
        for k in 0..got.dim() {
            worst = worst.max((got.p2d[[i, k]] - o.mean2d[k]).abs());
            worst = worst.max((got.p3d[[i, k]] - o.mean3d[k]).abs());
        }
    }
    pass &= worst < PROTO_TOL;

    // Two scenes, one shared class.
    let a = bank_of(&[unit(3, 0), unit(3, 2)], &[unit(3, 1), unit(3, 2)], vec![4, 1]);
    let b = bank_of(&[unit(3, 1)], &[unit(3, 0)], vec![4]);
    let cross = build_prototypes(&[a, b]).unwrap();
    let r = cross.row_of(4).expect("shared class present");
    let shared = cross.count2d[r] == 2
        && cross.count3d[r] == 2
        && (0..3).all(|k| (cross.p2d[[r, k]] - [0.5, 0.5, 0.0][k]).abs() < PROTO_TOL)
        && (0..3).all(|k| (cross.p3d[[r, k]] - [0.5, 0.5, 0.0][k]).abs() < PROTO_TOL);
    Verdict {
        id: 3,
        name: "prototype correctness",
        pass: pass && shared,
        detail: format!("{} classes over 3 scenes, max abs err {worst:.2e}; cross-scene count {}", got.len(), cross.count3d[r]),
    }
}

fn criterion_schedule() -> Verdict {
    let scenes = common::scenes(11, 8, 1024);
    let mut cfg = TrainConfig { epochs: 8, ..TrainConfig::default() };
    cfg.loss.lambda = LAMBDA;
    let outcome = pretrain(&scenes, &cfg, ExecMode::Parallel).unwrap();
    let mut lines = outcome.metrics_csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (ce, cg, cp) = (col("epoch"), col("gate"), col("loss_pro"));
    let mut pass = true;
    let mut first_open = None;
    let mut n = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let epoch: u32 = f[ce].parse().unwrap();
        let gate: u8 = f[cg].parse().unwrap();
        let pro: f64 = f[cp].parse().unwrap();
        pass &= gate == u8::from(epoch > LAMBDA);
        pass &= gate == 1 || pro == 0.0;
        if gate == 1 && first_open.is_none() {
            first_open = Some(epoch);
        }
        n += 1;
    }
    pass &= first_open == Some(LAMBDA + 1);
    Verdict {
        id: 4,
        name: "schedule fidelity",
        pass,
        detail: format!("{n} rows; first gate=1 at epoch {first_open:?}"),
    }
}

fn desk_scenes() -> Vec<Scene> {
    generate_set(DESK_SCENE_SEED, DESK_SCENES, 1, &SemanticOracleConfig::default(), &SceneGeometry::default(), ExecMode::Parallel)
        .unwrap()
}

fn criterion_determinism(scenes: &[Scene]) -> Verdict {
    let cfg = TrainConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    pretrain_to_dir(scenes, &cfg, ExecMode::Parallel, &a).unwrap();
    let elapsed = start.elapsed();
    pretrain_to_dir(scenes, &cfg, ExecMode::Sequential, &b).unwrap();
    let same = |f: &str| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap();
    let (m, c) = (same(METRICS_FILE), same(CHECKPOINT_FILE));
    Verdict {
        id: 5,
        name: "determinism",
        pass: m && c && elapsed < DESK_BUDGET,
        detail: format!(
            "metrics identical={m}, checkpoint identical={c}; desk run ({} epochs, {} scenes, K={}) {:.1}s",
            cfg.epochs,
            scenes.len(),
            scenes[0].frame.points.len(),
            elapsed.as_secs_f64()
        ),
    }
}

fn criterion_ablation(scenes: &[Scene]) -> Verdict {
    let cfg = TrainConfig::default();
    let result = run_ablation(scenes, &cfg, cfg.seed, ABLATION_SEEDS, ABLATION_FRACTION, ExecMode::Parallel).unwrap();
    print!("{}", result.summary());
    let detail = result
        .comparisons
        .iter()
        .map(|c| format!("{}>{}: {:+.4} (se {:.4}) {}", c.better, c.worse, c.mean_diff, c.paired_se, if c.holds() { "ok" } else { "short" }))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict {
        id: 6,
        name: "directional ablation",
        pass: result.comparisons.iter().all(|c| c.holds()),
        detail,
    }
}

fn criterion_associations() -> Verdict {
    let mut pass = true;
    let mut regions = 0;
    for seed in 0..5 {
        let scene = &common::scenes(100 + seed, 1, 2048)[0];
        let table = build_associations(&scene.frame, ExecMode::Parallel);
        let got: Vec<common::OracleSuperpixel> = table
            .superpixels
            .iter()
            .map(|s| (s.camera, s.local_id, s.class, s.pixels.clone(), s.points.clone()))
            .collect();
        pass &= got == common::brute_force_associations(&scene.frame);
        for (l, proj) in table.point_to_pixel.iter().enumerate() {
            let want: Vec<(u32, u32, u32)> = (0..scene.frame.points.len())
                .filter_map(|i| common::oracle_project(&scene.frame, l, i).map(|(r, c)| (i as u32, r, c)))
                .collect();
            pass &= *proj == want;
        }
        regions += got.len();
    }
    Verdict { id: 7, name: "projection oracle", pass, detail: format!("5 scenes, {regions} superpixels compared") }
}

fn criterion_round_trip() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let scene = &common::scenes(21, 1, 2048)[0];
    let first = encode_scene(&scene.frame).unwrap();
    let path = dir.path().join("s.cscs");
    write_scene(&scene.frame, &path).unwrap();
    let on_disk = fs::read(&path).unwrap();
    let reread = read_scene(&path).unwrap();
    let scene_ok = on_disk == first && encode_scene(&reread).unwrap() == first && decode_scene(&first).unwrap() == scene.frame;
    let labels = encode_labels(&scene.truth);
    let labels_ok = encode_labels(&decode_labels(&labels).unwrap()) == labels;

    let cfg = TrainConfig::default();
    let fw = scene.frame.feature_width as usize;
    let model = Model::init(&cfg, fw).unwrap();
    let (p1, p2) = (dir.path().join("a.cscw"), dir.path().join("b.cscw"));
    model.save(&p1).unwrap();
    Model::load(&p1, &cfg, fw).unwrap().save(&p2).unwrap();
    let ckpt_ok = fs::read(&p1).unwrap() == fs::read(&p2).unwrap();
    Verdict {
        id: 8,
        name: "round-trip I/O",
        pass: scene_ok && labels_ok && ckpt_ok,
        detail: format!("scene {} bytes ok={scene_ok}, labels ok={labels_ok}, checkpoint ok={ckpt_ok}", first.len()),
    }
}

fn report(v: &Verdict) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let note = if NON_GATING.contains(&v.id) { " [reported, non-gating]" } else { "" };
    println!("criterion {} {status} {}{note}: {}", v.id, v.name, v.detail);
}

fn main() {
    // `cargo test -- --list` and filters are harness conventions; honour the
    // listing so tooling does not run the whole suite by accident.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut verdicts = Vec::new();
    let mut run = |v: Verdict| {
        report(&v);
        verdicts.push(v);
    };
    run(criterion_gradcheck());
    run(criterion_closed_forms());
    run(criterion_prototypes());
    run(criterion_schedule());
    let scenes = desk_scenes();
    run(criterion_determinism(&scenes));
    run(criterion_ablation(&scenes));
    run(criterion_associations());
    run(criterion_round_trip());

    let passed = verdicts.iter().filter(|v| v.pass).count();
    let gating_failures: Vec<u32> = verdicts.iter().filter(|v| !v.pass && !NON_GATING.contains(&v.id)).map(|v| v.id).collect();
    println!("acceptance: {passed}/{} criteria pass", verdicts.len());
    if !gating_failures.is_empty() {
        println!("acceptance: failing criteria {gating_failures:?}");
        std::process::exit(1);
    }
}
