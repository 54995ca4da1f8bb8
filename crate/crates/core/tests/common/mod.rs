//! Independent oracles shared by the integration tests. Nothing here calls
//! the code paths it is compared against.

#![allow(dead_code)]

use std::collections::BTreeMap;

use csc_core::embednet::EmbeddingBank;
use csc_core::scenegen::{generate_set, Scene, SceneFrame, SceneGeometry, SemanticOracleConfig, UNASSIGNED};
use csc_core::ExecMode;

pub fn small_geometry(points: usize) -> SceneGeometry {
    SceneGeometry { num_points: points, ..SceneGeometry::default() }
}

pub fn scenes(seed: u64, count: usize, points: usize) -> Vec<Scene> {
    generate_set(seed, count, 1, &SemanticOracleConfig::default(), &small_geometry(points), ExecMode::Sequential).unwrap()
}

/// Group-by mean with plain nested loops and `Vec<f64>` accumulators.
pub struct OracleProto {
    pub mean2d: Vec<f64>,
    pub mean3d: Vec<f64>,
    pub n2d: usize,
    pub n3d: usize,
}

pub fn brute_force_prototypes(banks: &[EmbeddingBank]) -> BTreeMap<u16, OracleProto> {
    let d = banks[0].f2d.ncols();
    let mut sums: BTreeMap<u16, (Vec<f64>, Vec<f64>, usize, usize)> = BTreeMap::new();
    for bank in banks {
        for q in 0..bank.signs.len() {
            let e = sums.entry(bank.signs[q]).or_insert_with(|| (vec![0.0; d], vec![0.0; d], 0, 0));
            for k in 0..d {
                if bank.valid2d[q] {
                    e.0[k] += bank.f2d[[q, k]];
                }
                if bank.valid3d[q] {
                    e.1[k] += bank.f3d[[q, k]];
                }
            }
            e.2 += usize::from(bank.valid2d[q]);
            e.3 += usize::from(bank.valid3d[q]);
        }
    }
    sums.into_iter()
        .filter(|(_, e)| e.2 > 0 && e.3 > 0)
        .map(|(c, (s2, s3, n2, n3))| {
            let mean2d = s2.iter().map(|v| v / n2 as f64).collect();
            let mean3d = s3.iter().map(|v| v / n3 as f64).collect();
            (c, OracleProto { mean2d, mean3d, n2d: n2, n3d: n3 })
        })
        .collect()
}

/// `(camera, local id, class, pixels, points)` per superpixel.
pub type OracleSuperpixel = (u32, u32, u16, Vec<u32>, Vec<u32>);

/// Pinhole projection written out longhand.
pub fn oracle_project(frame: &SceneFrame, cam: usize, point: usize) -> Option<(u32, u32)> {
    let c = &frame.views[cam].camera;
    let p = &frame.points[point];
    let m = c.world_to_cam;
    let w = [p.x as f64, p.y as f64, p.z as f64];
    let mut pc = [0.0f64; 3];
    for (i, out) in pc.iter_mut().enumerate() {
        *out = m[i][0] as f64 * w[0] + m[i][1] as f64 * w[1] + m[i][2] as f64 * w[2] + m[i][3] as f64;
    }
    if pc[2] <= 0.0 {
        return None;
    }
    let u = (c.fx as f64 * pc[0] / pc[2] + c.cx as f64).round_ties_even();
    let v = (c.fy as f64 * pc[1] / pc[2] + c.cy as f64).round_ties_even();
    if u < 0.0 || v < 0.0 || u >= c.width as f64 || v >= c.height as f64 {
        return None;
    }
    Some((v as u32, u as u32))
}

/// Double loop over (superpixel, point): a point belongs to a superpixel
/// when the lowest camera that sees it is the superpixel's camera and the
/// pixel it lands on carries the superpixel's id.
pub fn brute_force_associations(frame: &SceneFrame) -> Vec<OracleSuperpixel> {
    let first_camera: Vec<Option<(usize, u32, u32)>> = (0..frame.points.len())
        .map(|i| (0..frame.views.len()).find_map(|l| oracle_project(frame, l, i).map(|(r, c)| (l, r, c))))
        .collect();
    let mut out = Vec::new();
    for (l, view) in frame.views.iter().enumerate() {
        let q = view.superpixels.iter().filter(|&&s| s != UNASSIGNED).max().map_or(0, |&s| s + 1);
        let w = view.camera.width;
        for s in 0..q {
            let pixels: Vec<u32> = (0..view.superpixels.len() as u32).filter(|&o| view.superpixels[o as usize] == s).collect();
            let mut counts = vec![0usize; frame.num_classes as usize];
            for &o in &pixels {
                counts[view.semantic[o as usize] as usize] += 1;
            }
            let mut class = 0u16;
            for (c, &n) in counts.iter().enumerate() {
                if n > counts[class as usize] {
                    class = c as u16;
                }
            }
            let points: Vec<u32> = (0..frame.points.len() as u32)
                .filter(|&i| match first_camera[i as usize] {
                    Some((cam, r, c)) => cam == l && view.superpixels[(r * w + c) as usize] == s,
                    None => false,
                })
                .collect();
            out.push((l as u32, s, class, pixels, points));
        }
    }
    out
}
