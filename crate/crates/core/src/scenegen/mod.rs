//! Deterministic synthetic lidar/camera frames with a semantic oracle.
//!
//! A scene is a ground plane with axis-aligned boxes and spheres standing on
//! it, seen by `L` cameras that share one optical center and fan out in yaw.
//! Objects occupy disjoint azimuth slots around that center, so no object
//! occludes another in any camera. The oracle output per camera is a
//! semantic raster plus a superpixel raster in which every visible object is
//! split into `oversegment_factor` vertical strips.

mod format;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use format::{
    decode_labels, decode_scene, encode_labels, encode_scene, read_labels, read_scene, write_labels,
    write_scene, LABELS_MAGIC, SCENE_MAGIC, FORMAT_VERSION,
};

use crate::error::{CscError, Result};
use crate::projection::project_point;

/// Width of the raw per-pixel feature vector.
pub const RAW_PIXEL_FEATURES: usize = 8;

/// Superpixel raster value for pixels that belong to no region (sky).
pub const UNASSIGNED: u32 = u32::MAX;

/// Semantic class of the ground plane. Object classes are `1..T`.
pub const GROUND_CLASS: u16 = 0;

/// Tolerance on `|RᵀR - I|∞` for rotations stored in single precision.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    /// Reflectance in `[0, 1]`.
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x as f64, self.y as f64, self.z as f64]
    }

    pub fn is_valid(&self) -> bool {
        self.x.is_finite()
            && self.y.is_finite()
            && self.z.is_finite()
            && (0.0..=1.0).contains(&self.intensity)
    }
}

/// Pinhole camera. Camera frame convention: `z` forward, `x` right, `y` down.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    /// Rigid world-to-camera transform, row-major.
    pub world_to_cam: [[f32; 4]; 4],
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |why: String| Err(CscError::Config(format!("invalid camera: {why}")));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy));
        }
        if !(self.cx >= 0.0 && (self.cx as f64) < self.width as f64) {
            return bad(format!("cx={} outside [0, {})", self.cx, self.width));
        }
        if !(self.cy >= 0.0 && (self.cy as f64) < self.height as f64) {
            return bad(format!("cy={} outside [0, {})", self.cy, self.height));
        }
        if self.world_to_cam.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite pose".into());
        }
        if self.world_to_cam[3] != [0.0, 0.0, 0.0, 1.0] {
            return bad("last pose row must be [0, 0, 0, 1]".into());
        }
        let r = self.rotation();
        let mut worst = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        if worst >= ROTATION_TOLERANCE {
            return bad(format!("rotation not orthonormal (|RᵀR - I| = {worst:e})"));
        }
        if det3(&r) <= 0.0 {
            return bad("rotation has negative determinant".into());
        }
        Ok(())
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.world_to_cam;
        std::array::from_fn(|i| std::array::from_fn(|j| m[i][j] as f64))
    }

    pub fn translation(&self) -> [f64; 3] {
        let m = &self.world_to_cam;
        [m[0][3] as f64, m[1][3] as f64, m[2][3] as f64]
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
    }

    /// Optical center in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> [f64; 3] {
        let r = self.rotation();
        let t = self.translation();
        std::array::from_fn(|j| -(r[0][j] * t[0] + r[1][j] * t[1] + r[2][j] * t[2]))
    }

    /// World-frame direction of the ray through the center of pixel `(row, col)`.
    pub fn pixel_ray(&self, row: u32, col: u32) -> [f64; 3] {
        let d = [
            (col as f64 - self.cx as f64) / self.fx as f64,
            (row as f64 - self.cy as f64) / self.fy as f64,
            1.0,
        ];
        let r = self.rotation();
        std::array::from_fn(|j| r[0][j] * d[0] + r[1][j] * d[1] + r[2][j] * d[2])
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// One camera with its rasters. All rasters are row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub camera: CameraModel,
    /// `height × width × feature_width` raw features.
    pub pixel_features: Vec<f32>,
    pub semantic: Vec<u16>,
    /// Dense superpixel ids `0..Q_cam`, or [`UNASSIGNED`].
    pub superpixels: Vec<u32>,
}

impl CameraView {
    /// `Q_cam`: one past the largest assigned superpixel id.
    pub fn superpixel_count(&self) -> u32 {
        self.superpixels
            .iter()
            .filter(|&&s| s != UNASSIGNED)
            .map(|&s| s + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn pixel_feature(&self, offset: usize, feature_width: usize) -> &[f32] {
        &self.pixel_features[offset * feature_width..(offset + 1) * feature_width]
    }
}

/// One point-cloud keyframe and its calibrated camera views.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub num_classes: u32,
    pub feature_width: u32,
    pub points: Vec<Point>,
    pub views: Vec<CameraView>,
}

impl SceneFrame {
    pub fn height(&self) -> u32 {
        self.views.first().map_or(0, |v| v.camera.height)
    }

    pub fn width(&self) -> u32 {
        self.views.first().map_or(0, |v| v.camera.width)
    }

    /// Checks the structural invariants. Superpixel purity is not checked
    /// here because label noise legitimately breaks it.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as u32 {
            return Err(CscError::Config(format!("num_classes={} outside [2, 65535]", self.num_classes)));
        }
        if let Some(i) = self.points.iter().position(|p| !p.is_valid()) {
            return Err(CscError::Config(format!("point {i} is not finite or has intensity outside [0,1]")));
        }
        let (h, w) = (self.height(), self.width());
        let fw = self.feature_width as usize;
        for (l, view) in self.views.iter().enumerate() {
            view.camera.validate()?;
            if view.camera.height != h || view.camera.width != w {
                return Err(CscError::Config(format!("camera {l} raster size differs from camera 0")));
            }
            let n = view.camera.pixel_count();
            if view.semantic.len() != n || view.superpixels.len() != n || view.pixel_features.len() != n * fw {
                return Err(CscError::Config(format!("camera {l} raster lengths do not match {h}x{w}")));
            }
            if let Some(&s) = view.semantic.iter().find(|&&s| s as u32 >= self.num_classes) {
                return Err(CscError::Config(format!("camera {l} has semantic id {s} >= T")));
            }
        }
        Ok(())
    }
}

/// Hidden per-point ground truth, kept out of the scene file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub scene_id: u64,
    pub frame_index: u32,
    pub point_labels: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub frame: SceneFrame,
    pub truth: GroundTruth,
}

/// Stand-in for a category-sensitive segmentation model.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticOracleConfig {
    /// `T`, including the ground class.
    pub num_classes: u32,
    pub objects_per_scene: u32,
    /// Number of superpixels each object region is split into.
    pub oversegment_factor: u32,
    /// Probability that a superpixel's semantic label is replaced by a
    /// different class.
    pub noise: f64,
}

impl Default for SemanticOracleConfig {
    fn default() -> Self {
        SemanticOracleConfig {
            num_classes: 8,
            objects_per_scene: 8,
            oversegment_factor: 3,
            noise: 0.0,
        }
    }
}

impl SemanticOracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > u16::MAX as u32 {
            return Err(CscError::Config(format!("num_classes={} must be in [2, 65535]", self.num_classes)));
        }
        if self.objects_per_scene == 0 {
            return Err(CscError::Config("objects_per_scene must be at least 1".into()));
        }
        if self.oversegment_factor == 0 {
            return Err(CscError::Config("oversegment_factor must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(CscError::Config(format!("noise={} must be in [0, 1)", self.noise)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGeometry {
    /// Half side length of the square ground plane, meters.
    pub extent: f64,
    /// `K`
    pub num_points: usize,
    /// `L`
    pub num_cameras: usize,
    pub height: u32,
    pub width: u32,
    pub camera_height: f64,
    /// Horizontal field of view, degrees.
    pub fov_deg: f64,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        SceneGeometry {
            extent: 40.0,
            num_points: 4096,
            num_cameras: 2,
            height: 64,
            width: 64,
            camera_height: 1.5,
            fov_deg: 90.0,
        }
    }
}

impl SceneGeometry {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CscError::Config(m));
        if !(self.extent.is_finite() && self.extent > 10.0) {
            return err(format!("extent={} must exceed 10 m", self.extent));
        }
        if self.num_points == 0 || self.num_points > u32::MAX as usize {
            return err(format!("num_points={} out of range", self.num_points));
        }
        if self.num_cameras == 0 {
            return err("num_cameras must be at least 1".into());
        }
        if self.height < 8 || self.width < 8 {
            return err(format!("raster {}x{} too small (min 8x8)", self.height, self.width));
        }
        if !(self.camera_height > 0.2 && self.camera_height < 1.75) {
            return err(format!("camera_height={} must be in (0.2, 1.75)", self.camera_height));
        }
        if !(self.fov_deg > 20.0 && self.fov_deg < 150.0) {
            return err(format!("fov_deg={} must be in (20, 150)", self.fov_deg));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Ground,
    Cuboid { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    class: u16,
}

/// Ray hit distance, if any.
fn intersect(shape: &Shape, origin: [f64; 3], dir: [f64; 3], extent: f64) -> Option<f64> {
    match *shape {
        Shape::Ground => {
            if dir[2] >= 0.0 {
                return None;
            }
            let t = -origin[2] / dir[2];
            let x = origin[0] + t * dir[0];
            let y = origin[1] + t * dir[1];
            (t > 0.0 && x.abs() <= extent && y.abs() <= extent).then_some(t)
        }
        Shape::Cuboid { min, max } => {
            let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
            for a in 0..3 {
                if dir[a].abs() < 1e-15 {
                    if origin[a] < min[a] || origin[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / dir[a];
                let (mut lo, mut hi) = ((min[a] - origin[a]) * inv, (max[a] - origin[a]) * inv);
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return None;
                }
            }
            (t0 > 0.0).then_some(t0)
        }
        Shape::Sphere { center, radius } => {
            let oc = sub(origin, center);
            let a = dot(dir, dir);
            let b = dot(oc, dir);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / a;
            (t > 0.0).then_some(t)
        }
    }
}

fn contains(shape: &Shape, p: [f64; 3]) -> bool {
    match *shape {
        Shape::Ground => false,
        Shape::Cuboid { min, max } => (0..3).all(|a| p[a] > min[a] && p[a] < max[a]),
        Shape::Sphere { center, radius } => dot(sub(p, center), sub(p, center)) < radius * radius,
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn snap(v: f64) -> f32 {
    if v.abs() < 1e-12 {
        0.0
    } else {
        v as f32
    }
}

/// Camera `l` looks along world yaw `2πl/L` from `(0, 0, camera_height)`.
fn build_camera(geom: &SceneGeometry, index: usize) -> CameraModel {
    let yaw = std::f64::consts::TAU * index as f64 / geom.num_cameras as f64;
    let (s, c) = yaw.sin_cos();
    // Rows are the camera axes in world coordinates: x right, y down, z forward.
    let rot = [[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]];
    let eye = [0.0, 0.0, geom.camera_height];
    let mut m = [[0.0f32; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = snap(rot[i][j]);
        }
        m[i][3] = snap(-dot(rot[i], eye));
    }
    m[3][3] = 1.0;
    let focal = (geom.width as f64 / 2.0) / (geom.fov_deg.to_radians() / 2.0).tan();
    CameraModel {
        fx: focal as f32,
        fy: focal as f32,
        cx: geom.width as f32 / 2.0,
        cy: geom.height as f32 / 2.0,
        world_to_cam: m,
        width: geom.width,
        height: geom.height,
    }
}

/// Object classes alternate between cuboids (odd ids) and spheres (even ids).
/// Nominal sizes depend on the class only, so geometry is a cross-scene cue.
fn make_object(class: u16, azimuth: f64, distance_floor: f64, slot_half: f64, extent: f64, rng: &mut ChaCha8Rng) -> Result<Object> {
    let c = class as f64;
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(0.9..1.1);
    let (footprint, build): (f64, Box<dyn Fn([f64; 2]) -> Shape>) = if class % 2 == 1 {
        let hw = (0.35 + 0.08 * c) * jitter(rng);
        let hd = (0.35 + 0.08 * c) * jitter(rng);
        let h = (1.8 + 0.22 * c) * jitter(rng);
        ((hw * hw + hd * hd).sqrt(), Box::new(move |xy: [f64; 2]| Shape::Cuboid {
            min: [xy[0] - hd, xy[1] - hw, 0.0],
            max: [xy[0] + hd, xy[1] + hw, h],
        }))
    } else {
        let r = (0.9 + 0.06 * c) * jitter(rng);
        (r, Box::new(move |xy: [f64; 2]| Shape::Sphere { center: [xy[0], xy[1], r], radius: r }))
    };
    let fit = footprint / (0.8 * slot_half).sin();
    let distance = distance_floor.max(fit) + rng.gen_range(0.0..3.0);
    if distance + footprint > 0.9 * extent {
        return Err(CscError::Config(format!(
            "objects do not fit: need {distance:.1} m for class {class} but extent is {extent} m; \
             use fewer objects_per_scene or more cameras"
        )));
    }
    let (s, co) = azimuth.sin_cos();
    Ok(Object { shape: build([distance * co, distance * s]), class })
}

fn class_code(class: u16) -> [f64; RAW_PIXEL_FEATURES] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x00C1_A55C_0DE5 ^ class as u64);
    std::array::from_fn(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
}

/// Narrow intensity bands per class. Bands of different classes interleave,
/// so class is not a monotone function of intensity.
const INTENSITY_BANDS: u32 = 3;

/// Draws a reflectance for `class`: one of its bands, uniform inside it.
fn class_intensity(class: u16, num_classes: u32, rng: &mut ChaCha8Rng) -> f64 {
    let total = num_classes * INTENSITY_BANDS;
    let k = rng.gen_range(0..INTENSITY_BANDS);
    // Band slot k*T + c, scattered by a fixed stride coprime with the band count.
    let slot = (k * num_classes + class as u32) as u64;
    let band = (slot * band_stride(total)) % total as u64;
    (band as f64 + rng.gen_range(0.15..0.85)) / total as f64
}

fn band_stride(total: u32) -> u64 {
    let mut s = (total as u64 * 2 / 5).max(1);
    while gcd(s, total as u64) != 1 {
        s += 1;
    }
    s
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-camera raster of object indices (into the layout's object list).
struct ObjectRaster {
    ids: Vec<Option<u32>>,
}

fn rasterize(camera: &CameraModel, objects: &[Object], extent: f64) -> ObjectRaster {
    let origin = camera.center();
    let mut ids = Vec::with_capacity(camera.pixel_count());
    for row in 0..camera.height {
        for col in 0..camera.width {
            let dir = camera.pixel_ray(row, col);
            let mut best: Option<(f64, u32)> = None;
            for (i, obj) in objects.iter().enumerate() {
                if let Some(t) = intersect(&obj.shape, origin, dir, extent) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, i as u32));
                    }
                }
            }
            ids.push(best.map(|(_, i)| i));
        }
    }
    ObjectRaster { ids }
}

/// Splits every object's pixels into up to `k` strips of near-equal size,
/// ordered by (column, row). Returns the superpixel raster and, per
/// superpixel, the owning object index.
fn oversegment(raster: &ObjectRaster, width: u32, num_objects: usize, k: u32) -> (Vec<u32>, Vec<u32>) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_objects];
    for (offset, id) in raster.ids.iter().enumerate() {
        if let Some(o) = id {
            members[*o as usize].push(offset);
        }
    }
    let w = width as usize;
    let mut superpixels = vec![UNASSIGNED; raster.ids.len()];
    let mut owners = Vec::new();
    for (obj, mut pixels) in members.into_iter().enumerate() {
        if pixels.is_empty() {
            continue;
        }
        pixels.sort_by_key(|&o| (o % w, o / w));
        let n = pixels.len();
        let parts = (k as usize).min(n);
        for p in 0..parts {
            let id = owners.len() as u32;
            owners.push(obj as u32);
            for &o in &pixels[p * n / parts..(p + 1) * n / parts] {
                superpixels[o] = id;
            }
        }
    }
    (superpixels, owners)
}

struct Layout {
    objects: Vec<Object>,
    cameras: Vec<CameraModel>,
    rasters: Vec<ObjectRaster>,
    superpixels: Vec<Vec<u32>>,
    /// Per camera, per superpixel: class after label noise.
    sp_labels: Vec<Vec<u16>>,
    /// Per camera, per superpixel: identity code added to pixel features.
    sp_codes: Vec<Vec<[f64; RAW_PIXEL_FEATURES]>>,
}

fn build_layout(seed: u64, cfg: &SemanticOracleConfig, geom: &SceneGeometry) -> Result<Layout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras: Vec<CameraModel> = (0..geom.num_cameras).map(|l| build_camera(geom, l)).collect();

    let half_fov = (geom.fov_deg / 2.0).to_radians();
    let sector_half = (half_fov - 5f64.to_radians()).min(std::f64::consts::PI / geom.num_cameras as f64);
    let n_obj = cfg.objects_per_scene as usize;
    let mut objects = vec![Object { shape: Shape::Ground, class: GROUND_CLASS }];
    let mut per_camera = vec![0usize; geom.num_cameras];
    for i in 0..n_obj {
        per_camera[i % geom.num_cameras] += 1;
    }
    let mut slot_of = vec![0usize; geom.num_cameras];
    for i in 0..n_obj {
        let cam = i % geom.num_cameras;
        let slots = per_camera[cam];
        let j = slot_of[cam];
        slot_of[cam] += 1;
        let yaw = std::f64::consts::TAU * cam as f64 / geom.num_cameras as f64;
        let slot_half = sector_half / slots as f64;
        let azimuth = yaw - sector_half + (2 * j + 1) as f64 * slot_half;
        let class = rng.gen_range(1..cfg.num_classes) as u16;
        objects.push(make_object(class, azimuth, 7.0, slot_half, geom.extent, &mut rng)?);
    }

    let rasters: Vec<ObjectRaster> = cameras.iter().map(|c| rasterize(c, &objects, geom.extent)).collect();
    let min_pixels = cfg.oversegment_factor as usize;
    for (i, obj) in objects.iter().enumerate().skip(1) {
        let covered: usize = rasters
            .iter()
            .map(|r| r.ids.iter().filter(|&&id| id == Some(i as u32)).count())
            .sum();
        if covered < min_pixels {
            return Err(CscError::Config(format!(
                "object {i} (class {}) covers {covered} pixels, need at least {min_pixels}; \
                 raise the raster resolution or lower objects_per_scene",
                obj.class
            )));
        }
    }

    let mut superpixels = Vec::new();
    let mut sp_labels = Vec::new();
    let mut sp_codes = Vec::new();
    for raster in &rasters {
        let (sp, owners) = oversegment(raster, geom.width, objects.len(), cfg.oversegment_factor);
        let labels: Vec<u16> = owners
            .iter()
            .map(|&o| {
                let truth = objects[o as usize].class;
                if cfg.noise > 0.0 && rng.gen::<f64>() < cfg.noise {
                    let other = rng.gen_range(0..cfg.num_classes - 1) as u16;
                    if other >= truth { other + 1 } else { other }
                } else {
                    truth
                }
            })
            .collect();
        let codes = owners
            .iter()
            .map(|_| std::array::from_fn(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        superpixels.push(sp);
        sp_labels.push(labels);
        sp_codes.push(codes);
    }
    Ok(Layout { objects, cameras, rasters, superpixels, sp_labels, sp_codes })
}

fn sample_surface(obj: &Object, geom: &SceneGeometry, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match obj.shape {
        Shape::Ground => {
            let r = rng.gen_range(2.0..0.95 * geom.extent);
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            [r * a.cos(), r * a.sin(), 0.0]
        }
        Shape::Cuboid { min, max } => {
            let d = sub(max, min);
            // Four sides and the top; the bottom face rests on the ground.
            let areas = [d[1] * d[2], d[1] * d[2], d[0] * d[2], d[0] * d[2], d[0] * d[1]];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 4 && pick >= areas[face] {
                pick -= areas[face];
                face += 1;
            }
            let (u, v): (f64, f64) = (rng.gen(), rng.gen());
            match face {
                0 => [min[0], min[1] + u * d[1], min[2] + v * d[2]],
                1 => [max[0], min[1] + u * d[1], min[2] + v * d[2]],
                2 => [min[0] + u * d[0], min[1], min[2] + v * d[2]],
                3 => [min[0] + u * d[0], max[1], min[2] + v * d[2]],
                _ => [min[0] + u * d[0], min[1] + v * d[1], max[2]],
            }
        }
        Shape::Sphere { center, radius } => {
            let n: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let len = dot(n, n).sqrt().max(1e-12);
            std::array::from_fn(|a| center[a] + radius * n[a] / len)
        }
    }
}

/// Generates frame 0 of scene `seed`.
pub fn generate_scene(seed: u64, cfg: &SemanticOracleConfig, geom: &SceneGeometry) -> Result<Scene> {
    generate_frame(seed, 0, cfg, geom)
}

/// Generates one keyframe of scene `seed`. Frames of the same scene share
/// the object layout, cameras and oracle rasters; the point samples and the
/// pixel feature noise differ per frame.
pub fn generate_frame(seed: u64, frame_index: u32, cfg: &SemanticOracleConfig, geom: &SceneGeometry) -> Result<Scene> {
    cfg.validate()?;
    geom.validate()?;
    let layout = build_layout(seed, cfg, geom)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index as u64 + 1);

    let fw = RAW_PIXEL_FEATURES;
    let codes: Vec<[f64; RAW_PIXEL_FEATURES]> = (0..cfg.num_classes).map(|c| class_code(c as u16)).collect();
    let mut views = Vec::with_capacity(layout.cameras.len());
    for (l, camera) in layout.cameras.iter().enumerate() {
        let (h, w) = (camera.height as usize, camera.width as usize);
        let mut features = Vec::with_capacity(h * w * fw);
        let mut semantic = Vec::with_capacity(h * w);
        for offset in 0..h * w {
            let (row, col) = (offset / w, offset % w);
            let mut f = [0.0f64; RAW_PIXEL_FEATURES];
            match (layout.rasters[l].ids[offset], layout.superpixels[l][offset]) {
                (Some(obj), sp) if sp != UNASSIGNED => {
                    let class = layout.objects[obj as usize].class;
                    let code = &codes[class as usize];
                    let sp_code = &layout.sp_codes[l][sp as usize];
                    for ch in 0..fw {
                        f[ch] = code[ch] + sp_code[ch];
                    }
                    f[fw - 2] += row as f64 / h as f64 - 0.5;
                    f[fw - 1] += col as f64 / w as f64 - 0.5;
                    semantic.push(layout.sp_labels[l][sp as usize]);
                }
                _ => semantic.push(GROUND_CLASS),
            }
            for v in f.iter_mut() {
                *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
                features.push(*v as f32);
            }
        }
        views.push(CameraView {
            camera: camera.clone(),
            pixel_features: features,
            semantic,
            superpixels: layout.superpixels[l].clone(),
        });
    }

    // Rejection sampling keeps every point consistent with the rasters of
    // every camera it projects into.
    let objects = &layout.objects;
    let mut points = Vec::with_capacity(geom.num_points);
    let mut labels = Vec::with_capacity(geom.num_points);
    let max_attempts = 200 * geom.num_points;
    let mut attempts = 0;
    while points.len() < geom.num_points {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CscError::Config(format!(
                "point sampling stalled after {max_attempts} attempts ({} of {} points)",
                points.len(),
                geom.num_points
            )));
        }
        let obj_index = if objects.len() == 1 || rng.gen::<bool>() {
            0
        } else {
            rng.gen_range(1..objects.len())
        };
        let obj = &objects[obj_index];
        let pos = sample_surface(obj, geom, &mut rng);
        if obj_index == 0 && objects.iter().skip(1).any(|o| contains(&o.shape, [pos[0], pos[1], 0.01])) {
            continue;
        }
        let intensity = class_intensity(obj.class, cfg.num_classes, &mut rng);
        let point = Point::new(pos[0] as f32, pos[1] as f32, pos[2] as f32, intensity as f32);
        let consistent = layout.cameras.iter().enumerate().all(|(l, cam)| match project_point(&point, cam) {
            None => true,
            Some((row, col)) => {
                let offset = row as usize * cam.width as usize + col as usize;
                layout.rasters[l].ids[offset] == Some(obj_index as u32)
                    && layout.superpixels[l][offset] != UNASSIGNED
            }
        });
        if consistent {
            points.push(point);
            labels.push(obj.class);
        }
    }

    Ok(Scene {
        frame: SceneFrame {
            num_classes: cfg.num_classes,
            feature_width: fw as u32,
            points,
            views,
        },
        truth: GroundTruth { scene_id: seed, frame_index, point_labels: labels },
    })
}

/// Derives the seed of scene `index` in a generated set.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `count` scenes with `frames` keyframes each, in scene-major order.
pub fn generate_set(
    base_seed: u64,
    count: usize,
    frames: u32,
    cfg: &SemanticOracleConfig,
    geom: &SceneGeometry,
    mode: crate::ExecMode,
) -> Result<Vec<Scene>> {
    let jobs: Vec<(u64, u32)> = (0..count as u64)
        .flat_map(|i| (0..frames).map(move |f| (i, f)))
        .collect();
    mode.map(&jobs, |&(i, f)| {
        generate_frame(scene_seed(base_seed, i), f, cfg, geom).map(|mut s| {
            s.truth.scene_id = i;
            s
        })
    })
    .into_iter()
    .collect()
}

/// Shuffles a slice with a seeded generator. Shared by the trainer and the
/// probe so every random choice in the crate goes through ChaCha8.
pub(crate) fn seeded_shuffle<T>(items: &mut [T], seed: u64, stream: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    items.shuffle(&mut rng);
}
