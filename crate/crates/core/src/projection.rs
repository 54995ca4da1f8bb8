//! Point to pixel projection and superpixel/superpoint association.

use std::fmt::Write as _;

use crate::exec::ExecMode;
use crate::scenegen::{CameraModel, Point, SceneFrame, UNASSIGNED};

/// Projects a world point to `(row, col)`. `None` when the point is behind
/// the camera or lands outside the raster. Sub-pixel coordinates are rounded
/// to the nearest integer with ties to even.
pub fn project_point(p: &Point, cam: &CameraModel) -> Option<(u32, u32)> {
    let [x, y, z] = cam.to_camera(p.position());
    if !(z > 0.0) {
        return None;
    }
    let u = (cam.fx as f64 * x / z + cam.cx as f64).round_ties_even();
    let v = (cam.fy as f64 * y / z + cam.cy as f64).round_ties_even();
    if v >= 0.0 && v < cam.height as f64 && u >= 0.0 && u < cam.width as f64 {
        Some((v as u32, u as u32))
    } else {
        None
    }
}

/// One superpixel (pixel group) and its superpoint (the points grouped
/// under it).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Superpixel {
    pub camera: u32,
    pub local_id: u32,
    /// Semantic sign: class id of the superpixel's pixels.
    pub class: u16,
    /// Row-major raster offsets within `camera`, ascending.
    pub pixels: Vec<u32>,
    /// Indices into the frame's point list, ascending.
    pub points: Vec<u32>,
}

impl Superpixel {
    /// Superpixels without points take no part in any loss term.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A projected point: `(point index, row, col)`.
pub type Projection = (u32, u32, u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AssociationTable {
    /// Per camera, every valid projection, ascending by point index.
    pub point_to_pixel: Vec<Vec<Projection>>,
    /// Global superpixel list, camera-major then local id.
    pub superpixels: Vec<Superpixel>,
}

impl AssociationTable {
    /// `Q`, including empty superpixels.
    pub fn len(&self) -> usize {
        self.superpixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpixels.is_empty()
    }

    pub fn nonempty(&self) -> impl Iterator<Item = (usize, &Superpixel)> {
        self.superpixels.iter().enumerate().filter(|(_, s)| !s.is_empty())
    }

    /// Text dump, one line per superpixel: `id class |pixels| |points|`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (q, s) in self.superpixels.iter().enumerate() {
            let _ = writeln!(out, "{q} {} {} {}", s.class, s.pixels.len(), s.points.len());
        }
        out
    }
}

fn majority_class(view_semantic: &[u16], pixels: &[u32]) -> u16 {
    let mut counts = std::collections::BTreeMap::new();
    for &o in pixels {
        *counts.entry(view_semantic[o as usize]).or_insert(0usize) += 1;
    }
    // Largest count; BTreeMap order makes the smallest id win ties.
    let mut best = (0u16, 0usize);
    for (c, n) in counts {
        if n > best.1 {
            best = (c, n);
        }
    }
    best.0
}

/// Groups pixels into superpixels and assigns every point to the superpixel
/// under its projection in the lowest-index camera that sees it. Points that
/// land on unassigned cells there are dropped.
pub fn build_associations(frame: &SceneFrame, mode: ExecMode) -> AssociationTable {
    let cams: Vec<usize> = (0..frame.views.len()).collect();
    let per_camera: Vec<(Vec<Projection>, Vec<Superpixel>)> = mode.map(&cams, |&l| {
        let view = &frame.views[l];
        let cam = &view.camera;
        let projections: Vec<Projection> = frame
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, p)| project_point(p, cam).map(|(r, c)| (i as u32, r, c)))
            .collect();
        let q = view.superpixel_count() as usize;
        let mut sps: Vec<Superpixel> = (0..q)
            .map(|id| Superpixel {
                camera: l as u32,
                local_id: id as u32,
                class: 0,
                pixels: Vec::new(),
                points: Vec::new(),
            })
            .collect();
        for (o, &s) in view.superpixels.iter().enumerate() {
            if s != UNASSIGNED {
                sps[s as usize].pixels.push(o as u32);
            }
        }
        for sp in &mut sps {
            sp.class = majority_class(&view.semantic, &sp.pixels);
        }
        (projections, sps)
    });

    // Deterministic merge in camera order.
    let mut claimed = vec![false; frame.points.len()];
    let mut point_to_pixel = Vec::with_capacity(per_camera.len());
    let mut superpixels = Vec::new();
    for (l, (projections, mut sps)) in per_camera.into_iter().enumerate() {
        let view = &frame.views[l];
        let w = view.camera.width as usize;
        for &(i, r, c) in &projections {
            if std::mem::replace(&mut claimed[i as usize], true) {
                continue;
            }
            let s = view.superpixels[r as usize * w + c as usize];
            if s != UNASSIGNED {
                sps[s as usize].points.push(i);
            }
        }
        point_to_pixel.push(projections);
        superpixels.extend(sps);
    }
    AssociationTable { point_to_pixel, superpixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{CameraView, SceneFrame};

    fn camera(f: f32, cx: f32, cy: f32, h: u32, w: u32) -> CameraModel {
        let mut m = [[0.0f32; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        CameraModel { fx: f, fy: f, cx, cy, world_to_cam: m, width: w, height: h }
    }

    #[test]
    fn principal_ray() {
        let cam = camera(1.0, 32.0, 32.0, 64, 64);
        assert_eq!(project_point(&Point::new(0.0, 0.0, 1.0, 0.5), &cam), Some((32, 32)));
    }

    #[test]
    fn behind_camera() {
        let cam = camera(1.0, 32.0, 32.0, 64, 64);
        assert_eq!(project_point(&Point::new(0.0, 0.0, -1.0, 0.5), &cam), None);
        assert_eq!(project_point(&Point::new(0.0, 0.0, 0.0, 0.5), &cam), None);
    }

    #[test]
    fn hand_evaluated_pinhole() {
        // row = 100·1/2 + 240, col = 100·2/2 + 320
        let cam = camera(100.0, 320.0, 240.0, 480, 640);
        assert_eq!(project_point(&Point::new(2.0, 1.0, 2.0, 0.0), &cam), Some((290, 420)));
    }

    #[test]
    fn rounding_ties_to_even_and_bounds() {
        let cam = camera(1.0, 0.0, 0.0, 4, 4);
        // u = 0.5 -> 0, u = 1.5 -> 2, u = 2.5 -> 2
        assert_eq!(project_point(&Point::new(0.5, 0.0, 1.0, 0.0), &cam), Some((0, 0)));
        assert_eq!(project_point(&Point::new(1.5, 0.0, 1.0, 0.0), &cam), Some((0, 2)));
        assert_eq!(project_point(&Point::new(2.5, 0.0, 1.0, 0.0), &cam), Some((0, 2)));
        // 3.5 rounds to 4, outside a 4-wide raster
        assert_eq!(project_point(&Point::new(3.5, 0.0, 1.0, 0.0), &cam), None);
        assert_eq!(project_point(&Point::new(-0.6, 0.0, 1.0, 0.0), &cam), None);
    }

    fn two_pixel_frame(points: Vec<Point>, cams: usize) -> SceneFrame {
        // 1×2 raster: left pixel superpixel 0, right pixel unassigned.
        let views = (0..cams)
            .map(|_| CameraView {
                camera: camera(1.0, 0.0, 0.0, 1, 2),
                pixel_features: vec![0.0; 2],
                semantic: vec![1, 0],
                superpixels: vec![0, UNASSIGNED],
            })
            .collect();
        SceneFrame { num_classes: 2, feature_width: 1, points, views }
    }

    #[test]
    fn overlapping_cameras_do_not_duplicate_points() {
        let pts = vec![Point::new(0.0, 0.0, 1.0, 0.0), Point::new(0.1, 0.0, 2.0, 0.0)];
        let table = build_associations(&two_pixel_frame(pts, 2), ExecMode::Sequential);
        assert_eq!(table.len(), 2);
        assert_eq!(table.superpixels[0].points, vec![0, 1]);
        assert!(table.superpixels[1].is_empty());
        assert_eq!(table.point_to_pixel[1].len(), 2);
        assert_eq!(table.superpixels[0].class, 1);
    }

    #[test]
    fn unassigned_cells_drop_points_everywhere() {
        // Projects to col 1 (unassigned) in camera 0; must not fall through to camera 1.
        let pts = vec![Point::new(1.0, 0.0, 1.0, 0.0)];
        let table = build_associations(&two_pixel_frame(pts, 2), ExecMode::Sequential);
        assert!(table.superpixels.iter().all(|s| s.points.is_empty()));
    }

    #[test]
    fn dump_lists_every_superpixel() {
        let pts = vec![Point::new(0.0, 0.0, 1.0, 0.0)];
        let table = build_associations(&two_pixel_frame(pts, 1), ExecMode::Sequential);
        assert_eq!(table.dump(), "0 1 1 1\n");
    }
}
