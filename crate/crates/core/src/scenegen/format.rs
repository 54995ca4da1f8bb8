//! Little-endian scene files (`CSCS`) and ground-truth label sidecars (`CSCL`).
//!
//! Scene layout:
//!
//! ```text
//! "CSCS" | version u32 | K L H W F0 T (u32 each)
//! K × (x y z intensity: f32)
//! L × ( fx fy cx cy: f32 | world_to_cam: 16 f32 row-major
//!       | pixel_features: H·W·F0 f32 | semantic: H·W u16 | superpixels: H·W u32 )
//! ```
//!
//! Label sidecar layout: `"CSCL" | version u32 | scene_id u64 | frame u32 | K u32 | K × u16`.

use std::fs;
use std::path::Path;

use super::{CameraModel, CameraView, GroundTruth, Point, SceneFrame};
use crate::error::{CscError, FormatError, FormatErrorKind, Result};

pub const SCENE_MAGIC: [u8; 4] = *b"CSCS";
pub const LABELS_MAGIC: [u8; 4] = *b"CSCL";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_scene(frame: &SceneFrame) -> Result<Vec<u8>> {
    let (h, w) = (frame.height(), frame.width());
    let fw = frame.feature_width as usize;
    let n = h as usize * w as usize;
    for (l, v) in frame.views.iter().enumerate() {
        if v.camera.height != h
            || v.camera.width != w
            || v.pixel_features.len() != n * fw
            || v.semantic.len() != n
            || v.superpixels.len() != n
        {
            return Err(CscError::shape("encode_scene", format!("{h}x{w} rasters"), format!("camera {l} differs")));
        }
    }
    let mut out = Vec::with_capacity(32 + frame.points.len() * 16 + frame.views.len() * (80 + n * (fw * 4 + 6)));
    out.extend_from_slice(&SCENE_MAGIC);
    for v in [
        FORMAT_VERSION,
        frame.points.len() as u32,
        frame.views.len() as u32,
        h,
        w,
        frame.feature_width,
        frame.num_classes,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in &frame.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for view in &frame.views {
        let c = &view.camera;
        for v in [c.fx, c.fy, c.cx, c.cy].iter().chain(c.world_to_cam.iter().flatten()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &view.pixel_features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &view.semantic {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &view.superpixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_scene(bytes: &[u8]) -> Result<SceneFrame, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(SCENE_MAGIC)?;
    r.version()?;
    let k = r.u32("header")? as usize;
    let l = r.u32("header")? as usize;
    let h = r.u32("header")?;
    let w = r.u32("header")?;
    let fw = r.u32("header")?;
    let t = r.u32("header")?;
    if t < 2 || t > u16::MAX as u32 {
        return Err(r.invalid("header", format!("class count {t} outside [2, 65535]")));
    }

    let coords = r.f32s(k.checked_mul(4), "points")?;
    let points = coords.chunks_exact(4).map(|c| Point::new(c[0], c[1], c[2], c[3])).collect();

    let n = (h as usize).checked_mul(w as usize);
    let mut views = Vec::with_capacity(l.min(1024));
    for cam in 0..l {
        let start = r.pos;
        let intr = r.f32s(Some(4), &format!("camera {cam} intrinsics"))?;
        let pose = r.f32s(Some(16), &format!("camera {cam} world_to_cam"))?;
        let camera = CameraModel {
            fx: intr[0],
            fy: intr[1],
            cx: intr[2],
            cy: intr[3],
            world_to_cam: std::array::from_fn(|i| std::array::from_fn(|j| pose[i * 4 + j])),
            width: w,
            height: h,
        };
        if let Err(e) = camera.validate() {
            return Err(FormatError {
                offset: start as u64,
                kind: FormatErrorKind::Invalid { section: format!("camera {cam}"), reason: e.to_string() },
            });
        }
        let pixel_features = r.f32s(n.and_then(|n| n.checked_mul(fw as usize)), &format!("camera {cam} pixel_features"))?;
        let sem_section = format!("camera {cam} semantic_raster");
        let sem_start = r.pos;
        let semantic = r.u16s(n, &sem_section)?;
        if let Some(i) = semantic.iter().position(|&s| s as u32 >= t) {
            return Err(FormatError {
                offset: (sem_start + 2 * i) as u64,
                kind: FormatErrorKind::Invalid { section: sem_section, reason: format!("class id {} >= {t}", semantic[i]) },
            });
        }
        let superpixels = r.u32s(n, &format!("camera {cam} superpixel_raster"))?;
        views.push(CameraView { camera, pixel_features, semantic, superpixels });
    }
    r.finish()?;
    Ok(SceneFrame { num_classes: t, feature_width: fw, points, views })
}

pub fn write_scene(frame: &SceneFrame, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_scene(frame)?)?;
    Ok(())
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<SceneFrame> {
    let bytes = fs::read(path)?;
    Ok(decode_scene(&bytes)?)
}

pub fn encode_labels(truth: &GroundTruth) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 2 * truth.point_labels.len());
    out.extend_from_slice(&LABELS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&truth.scene_id.to_le_bytes());
    out.extend_from_slice(&truth.frame_index.to_le_bytes());
    out.extend_from_slice(&(truth.point_labels.len() as u32).to_le_bytes());
    for v in &truth.point_labels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<GroundTruth, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(LABELS_MAGIC)?;
    r.version()?;
    let id = r.take(8, "header")?;
    let scene_id = u64::from_le_bytes(id.try_into().expect("8 bytes"));
    let frame_index = r.u32("header")?;
    let k = r.u32("header")? as usize;
    let point_labels = r.u16s(Some(k), "point labels")?;
    r.finish()?;
    Ok(GroundTruth { scene_id, frame_index, point_labels })
}

pub fn write_labels(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_labels(truth))?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let bytes = fs::read(path)?;
    Ok(decode_labels(&bytes)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn err(&self, kind: FormatErrorKind) -> FormatError {
        FormatError { offset: self.pos as u64, kind }
    }

    fn invalid(&self, section: &str, reason: String) -> FormatError {
        self.err(FormatErrorKind::Invalid { section: section.into(), reason })
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8], FormatError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(self.err(FormatErrorKind::Truncated { section: section.into() })),
        }
    }

    /// `count` is `None` when the element count overflowed `usize`.
    fn array(&mut self, count: Option<usize>, width: usize, section: &str) -> Result<&'a [u8], FormatError> {
        match count.and_then(|c| c.checked_mul(width)) {
            Some(bytes) => self.take(bytes, section),
            None => Err(self.err(FormatErrorKind::Truncated { section: section.into() })),
        }
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().expect("4 bytes");
        if found != expected {
            return Err(FormatError { offset: 0, kind: FormatErrorKind::BadMagic { expected, found } });
        }
        Ok(())
    }

    fn version(&mut self) -> Result<(), FormatError> {
        let at = self.pos;
        let found = self.u32("version")?;
        if found != FORMAT_VERSION {
            return Err(FormatError {
                offset: at as u64,
                kind: FormatErrorKind::VersionMismatch { expected: FORMAT_VERSION, found },
            });
        }
        Ok(())
    }

    fn u32(&mut self, section: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: Option<usize>, section: &str) -> Result<Vec<f32>, FormatError> {
        let raw = self.array(count, 4, section)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn u32s(&mut self, count: Option<usize>, section: &str) -> Result<Vec<u32>, FormatError> {
        let raw = self.array(count, 4, section)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn u16s(&mut self, count: Option<usize>, section: &str) -> Result<Vec<u16>, FormatError> {
        let raw = self.array(count, 2, section)?;
        Ok(raw.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().expect("2 bytes"))).collect())
    }

    fn finish(&self) -> Result<(), FormatError> {
        let rest = self.buf.len() - self.pos;
        if rest > 0 {
            return Err(self.err(FormatErrorKind::TrailingBytes(rest as u64)));
        }
        Ok(())
    }
}
