//! Scene sets on disk: one `.cscs` frame file and one `.cscl` label file per
//! keyframe, named `scene_{id:05}_f{frame:03}`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CscError, Result};
use crate::scenegen::{read_labels, read_scene, write_labels, write_scene, Scene};

pub fn frame_stem(scene_id: u64, frame_index: u32) -> String {
    format!("scene_{scene_id:05}_f{frame_index:03}")
}

/// Writes every scene into `dir`, creating it if needed. Returns the frame
/// file paths in input order.
pub fn write_scene_set(dir: impl AsRef<Path>, scenes: &[Scene]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(scenes.len());
    for s in scenes {
        let stem = frame_stem(s.truth.scene_id, s.truth.frame_index);
        let path = dir.join(format!("{stem}.cscs"));
        write_scene(&s.frame, &path)?;
        write_labels(&s.truth, dir.join(format!("{stem}.cscl")))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads every `.cscs` file in `dir` with its label sidecar, sorted by
/// `(scene_id, frame_index)`.
pub fn read_scene_set(dir: impl AsRef<Path>) -> Result<Vec<Scene>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "cscs"));
    files.sort();
    let mut scenes = Vec::with_capacity(files.len());
    for path in files {
        let frame = read_scene(&path)?;
        let truth = read_labels(path.with_extension("cscl"))?;
        if truth.point_labels.len() != frame.points.len() {
            return Err(CscError::Config(format!(
                "{}: {} labels for {} points",
                path.display(),
                truth.point_labels.len(),
                frame.points.len()
            )));
        }
        scenes.push(Scene { frame, truth });
    }
    if scenes.is_empty() {
        return Err(CscError::Config(format!("no .cscs files in {}", dir.display())));
    }
    scenes.sort_by_key(|s| (s.truth.scene_id, s.truth.frame_index));
    Ok(scenes)
}

/// Distinct scene ids, ascending.
pub fn scene_ids(scenes: &[Scene]) -> Vec<u64> {
    let mut ids: Vec<u64> = scenes.iter().map(|s| s.truth.scene_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Splits scene ids into training and held-out parts: the last quarter
/// (at least one scene) is held out.
pub fn holdout_split(scenes: &[Scene]) -> Result<(Vec<u64>, Vec<u64>)> {
    let ids = scene_ids(scenes);
    if ids.len() < 2 {
        return Err(CscError::Config(format!("need at least 2 scenes for a held-out split, got {}", ids.len())));
    }
    let held = (ids.len() / 4).max(1);
    let (train, test) = ids.split_at(ids.len() - held);
    Ok((train.to_vec(), test.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_set, SceneGeometry, SemanticOracleConfig};
    use crate::ExecMode;

    #[test]
    fn set_round_trip() {
        let geom = SceneGeometry { num_points: 256, height: 32, width: 32, ..Default::default() };
        let scenes = generate_set(5, 3, 2, &SemanticOracleConfig::default(), &geom, ExecMode::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene_set(dir.path(), &scenes).unwrap();
        let back = read_scene_set(dir.path()).unwrap();
        assert_eq!(back, scenes);
        assert!(dir.path().join("scene_00002_f001.cscl").exists());
        let (train, test) = holdout_split(&back).unwrap();
        assert_eq!((train, test), (vec![0, 1], vec![2]));
    }

    #[test]
    fn empty_dir_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_scene_set(dir.path()).is_err());
    }
}
