//! Pixel and point embedding networks, region pooling and checkpoints.

mod checkpoint;
mod dense;
mod pool;

use ndarray::{concatenate, Array2, Axis};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_into, read_checkpoint, write_checkpoint, StoredLayer,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dense::{Activation, DenseLayer, DenseStack, LayerGrad, StackCache, StackGrads};
pub use pool::{pool_backward, pool_regions, PooledRegions, ZERO_NORM};

use crate::error::{CscError, Result};
use crate::scenegen::Point;

/// Width of the point network input.
pub const POINT_FEATURES: usize = 4;

/// Fixed input scaling of `(x, y, z, intensity)`: metres to roughly unit range.
const POINT_INPUT_SCALE: [f64; POINT_FEATURES] = [0.1, 0.1, 0.5, 1.0];

pub fn encode_point(p: &Point) -> [f64; POINT_FEATURES] {
    let raw = [p.x as f64, p.y as f64, p.z as f64, p.intensity as f64];
    std::array::from_fn(|i| raw[i] * POINT_INPUT_SCALE[i])
}

/// Rows of `encode_point` for the selected points.
pub fn point_inputs(points: &[Point], indices: &[u32]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), POINT_FEATURES));
    for (r, &i) in indices.iter().enumerate() {
        for (c, v) in encode_point(&points[i as usize]).into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    out
}

/// Region embeddings of one batch: row `q` of both matrices is superpixel `q`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    /// `Q × D` superpixel embeddings.
    pub f2d: Array2<f64>,
    /// `Q × D` superpoint embeddings.
    pub f3d: Array2<f64>,
    pub valid2d: Vec<bool>,
    pub valid3d: Vec<bool>,
    /// Semantic sign per region.
    pub signs: Vec<u16>,
}

impl EmbeddingBank {
    pub fn new(f2d: Array2<f64>, f3d: Array2<f64>, valid2d: Vec<bool>, valid3d: Vec<bool>, signs: Vec<u16>) -> Result<Self> {
        let q = signs.len();
        if f2d.dim() != f3d.dim() || f2d.nrows() != q || valid2d.len() != q || valid3d.len() != q {
            return Err(CscError::shape(
                "embedding bank",
                format!("{q} rows everywhere"),
                format!("f2d {:?}, f3d {:?}, masks {}/{}", f2d.dim(), f3d.dim(), valid2d.len(), valid3d.len()),
            ));
        }
        Ok(EmbeddingBank { f2d, f3d, valid2d, valid3d, signs })
    }

    /// Assumes the two sides were pooled over the same groups.
    pub fn from_pooled(pixels: &PooledRegions, points: &PooledRegions, signs: Vec<u16>) -> Result<Self> {
        Self::new(pixels.rows.clone(), points.rows.clone(), pixels.valid.clone(), points.valid.clone(), signs)
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.f2d.ncols()
    }

    /// A region takes part in the contrastive losses only when both sides
    /// are valid.
    pub fn is_valid(&self, q: usize) -> bool {
        self.valid2d[q] && self.valid3d[q]
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&q| self.is_valid(q)).collect()
    }

    /// Stacks banks in order; row offsets follow input order.
    pub fn concat(banks: &[EmbeddingBank]) -> Result<Self> {
        let Some(first) = banks.first() else {
            return Err(CscError::EmptyBank);
        };
        let d = first.dim();
        if let Some(b) = banks.iter().find(|b| b.dim() != d) {
            return Err(CscError::shape("embedding bank concat", d, b.dim()));
        }
        let f2d = concatenate(Axis(0), &banks.iter().map(|b| b.f2d.view()).collect::<Vec<_>>()).expect("widths checked");
        let f3d = concatenate(Axis(0), &banks.iter().map(|b| b.f3d.view()).collect::<Vec<_>>()).expect("widths checked");
        Ok(EmbeddingBank {
            f2d,
            f3d,
            valid2d: banks.iter().flat_map(|b| b.valid2d.iter().copied()).collect(),
            valid3d: banks.iter().flat_map(|b| b.valid3d.iter().copied()).collect(),
            signs: banks.iter().flat_map(|b| b.signs.iter().copied()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn validity_requires_both_sides() {
        let bank = EmbeddingBank::new(
            array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
            array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]],
            vec![true, true, false],
            vec![true, false, true],
            vec![0, 1, 2],
        )
        .unwrap();
        assert_eq!(bank.valid_indices(), vec![0]);
    }

    #[test]
    fn concat_preserves_order() {
        let a = EmbeddingBank::new(array![[1.0, 0.0]], array![[0.0, 1.0]], vec![true], vec![true], vec![3]).unwrap();
        let b = EmbeddingBank::new(array![[0.0, 1.0]], array![[1.0, 0.0]], vec![true], vec![false], vec![4]).unwrap();
        let c = EmbeddingBank::concat(&[a, b]).unwrap();
        assert_eq!(c.signs, vec![3, 4]);
        assert_eq!(c.f2d, array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(c.valid3d, vec![true, false]);
        assert!(matches!(EmbeddingBank::concat(&[]), Err(CscError::EmptyBank)));
    }

    #[test]
    fn point_encoding_scales_coordinates() {
        let p = Point::new(10.0, -20.0, 2.0, 0.25);
        assert_eq!(encode_point(&p), [1.0, -2.0, 1.0, 0.25]);
    }
}
