use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{CscError, Result};

/// Pooled norms at or below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Average-pooled, L2-normalized region embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledRegions {
    /// `Q × D`; invalid rows are zero.
    pub rows: Array2<f64>,
    /// False for empty groups and zero-mean groups.
    pub valid: Vec<bool>,
    /// Norm of each group mean before normalization.
    norms: Array1<f64>,
    inputs: usize,
}

impl PooledRegions {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Row `q` is the mean of `features[groups[q]]`, normalized to unit length.
pub fn pool_regions(features: ArrayView2<f64>, groups: &[Vec<u32>]) -> Result<PooledRegions> {
    let (n, d) = features.dim();
    let mut rows = Array2::zeros((groups.len(), d));
    let mut norms = Array1::zeros(groups.len());
    let mut valid = vec![false; groups.len()];
    for (q, members) in groups.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut row = rows.row_mut(q);
        for &m in members {
            if m as usize >= n {
                return Err(CscError::shape("pool_regions member index", format!("< {n}"), m));
            }
            row += &features.row(m as usize);
        }
        row /= members.len() as f64;
        let norm = row.dot(&row).sqrt();
        if norm > ZERO_NORM {
            row /= norm;
            norms[q] = norm;
            valid[q] = true;
        } else {
            row.fill(0.0);
        }
    }
    Ok(PooledRegions { rows, valid, norms, inputs: n })
}

/// Gradient with respect to the pooled input features. Upstream rows of
/// invalid regions are ignored.
pub fn pool_backward(upstream: ArrayView2<f64>, pooled: &PooledRegions, groups: &[Vec<u32>]) -> Result<Array2<f64>> {
    if groups.len() != pooled.len() {
        return Err(CscError::StaleCache("pool_regions"));
    }
    if upstream.dim() != pooled.rows.dim() {
        return Err(CscError::shape("pool_backward upstream", format!("{:?}", pooled.rows.dim()), format!("{:?}", upstream.dim())));
    }
    let d = pooled.rows.ncols();
    let mut grad = Array2::zeros((pooled.inputs, d));
    for (q, members) in groups.iter().enumerate() {
        if !pooled.valid[q] {
            continue;
        }
        // d(m/|m|)/dm = (I - y yᵀ)/|m|, then the mean spreads 1/n to each member.
        let y = pooled.rows.row(q);
        let g = upstream.row(q);
        let scale = 1.0 / (pooled.norms[q] * members.len() as f64);
        let radial = y.dot(&g);
        let dm = (&g - &(&y * radial)) * scale;
        for &m in members {
            let mut row = grad.row_mut(m as usize);
            row += &dm;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_rows_pool_to_normalized_row() {
        let f = array![[3.0, 4.0], [3.0, 4.0], [3.0, 4.0]];
        let p = pool_regions(f.view(), &[vec![0, 1, 2]]).unwrap();
        assert!(p.valid[0]);
        assert!((p.rows[[0, 0]] - 0.6).abs() < 1e-15 && (p.rows[[0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cancelling_rows_are_invalid() {
        let f = array![[1.0, -2.0], [-1.0, 2.0]];
        let p = pool_regions(f.view(), &[vec![0, 1], vec![]]).unwrap();
        assert_eq!(p.valid, vec![false, false]);
        assert!(p.rows.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_member_group_matches_scalar_loop() {
        let f = array![[0.5, -1.0, 2.0], [1.5, 0.25, -0.5], [-0.75, 3.0, 1.0], [9.0, 9.0, 9.0]];
        let members = [0usize, 2, 1];
        let p = pool_regions(f.view(), &[members.iter().map(|&m| m as u32).collect()]).unwrap();
        let mut mean = [0.0f64; 3];
        for &m in &members {
            for c in 0..3 {
                mean[c] += f[[m, c]] / 3.0;
            }
        }
        let norm = (mean[0] * mean[0] + mean[1] * mean[1] + mean[2] * mean[2]).sqrt();
        for c in 0..3 {
            assert!((p.rows[[0, c]] - mean[c] / norm).abs() < 1e-14);
        }
    }

    #[test]
    fn out_of_range_member_is_shape_error() {
        let f = Array2::<f64>::ones((2, 2));
        assert!(pool_regions(f.view(), &[vec![2]]).is_err());
    }

    #[test]
    fn radial_upstream_has_no_effect() {
        let f = array![[1.0, 2.0], [3.0, 1.0]];
        let groups = [vec![0, 1]];
        let p = pool_regions(f.view(), &groups).unwrap();
        let up = p.rows.clone() * 5.0;
        let g = pool_backward(up.view(), &p, &groups).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));
    }
}
