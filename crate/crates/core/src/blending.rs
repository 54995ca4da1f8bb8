//! Multi-modality prototype blending.
//!
//! Each modality's prototypes go through their own projection stack into a
//! shared space; then, per class, the two projected prototypes are
//! concatenated and fused by one stack shared across classes:
//!
//! ```text
//! mix[t] = normalize(fuse([proj2d(P2d[t]) ; proj3d(P3d[t])]))
//! ```

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::embednet::{Activation, DenseStack, StackCache, StackGrads, ZERO_NORM};
use crate::error::{CscError, Result};
use crate::protobank::PrototypeBank;

#[derive(Clone, Debug, PartialEq)]
pub struct BlendParams {
    /// `D → D`
    pub proj2d: DenseStack,
    /// `D → D`
    pub proj3d: DenseStack,
    /// `2D → D`
    pub fuse: DenseStack,
}

impl BlendParams {
    pub fn new(proj2d: DenseStack, proj3d: DenseStack, fuse: DenseStack) -> Result<Self> {
        let d = proj2d.input_width();
        let ok = proj2d.output_width() == d
            && proj3d.input_width() == d
            && proj3d.output_width() == d
            && fuse.input_width() == 2 * d
            && fuse.output_width() == d;
        if !ok {
            return Err(CscError::shape(
                "blend params",
                format!("proj {d}->{d}, fuse {}->{d}", 2 * d),
                format!(
                    "proj2d {}->{}, proj3d {}->{}, fuse {}->{}",
                    proj2d.input_width(),
                    proj2d.output_width(),
                    proj3d.input_width(),
                    proj3d.output_width(),
                    fuse.input_width(),
                    fuse.output_width()
                ),
            ));
        }
        Ok(BlendParams { proj2d, proj3d, fuse })
    }

    /// Projections are `depth` affine layers of width `dim` (hidden layers
    /// use `hidden`); fusion is one affine layer.
    pub fn xavier<R: Rng>(dim: usize, depth: usize, hidden: Activation, rng: &mut R) -> Result<Self> {
        if depth == 0 {
            return Err(CscError::Config("projection depth must be at least 1".into()));
        }
        let widths = vec![dim; depth + 1];
        let proj2d = DenseStack::xavier(&widths, hidden, Activation::Identity, rng)?;
        let proj3d = DenseStack::xavier(&widths, hidden, Activation::Identity, rng)?;
        let fuse = DenseStack::xavier(&[2 * dim, dim], Activation::Identity, Activation::Identity, rng)?;
        BlendParams::new(proj2d, proj3d, fuse)
    }

    pub fn dim(&self) -> usize {
        self.proj2d.input_width()
    }

    pub fn stacks(&self) -> [&DenseStack; 3] {
        [&self.proj2d, &self.proj3d, &self.fuse]
    }

    pub fn stacks_mut(&mut self) -> [&mut DenseStack; 3] {
        [&mut self.proj2d, &mut self.proj3d, &mut self.fuse]
    }
}

#[derive(Clone, Debug)]
pub struct BlendCache {
    proj2d: StackCache,
    proj3d: StackCache,
    fuse: StackCache,
    mix: Array2<f64>,
    norms: Array1<f64>,
}

impl BlendCache {
    /// Pre-activation signs of all three stacks, for kink detection.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut p = self.proj2d.relu_pattern();
        p.extend(self.proj3d.relu_pattern());
        p.extend(self.fuse.relu_pattern());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlendGrads {
    pub proj2d: StackGrads,
    pub proj3d: StackGrads,
    pub fuse: StackGrads,
}

impl BlendGrads {
    pub fn zeros_like(params: &BlendParams) -> Self {
        BlendGrads {
            proj2d: StackGrads::zeros_like(&params.proj2d),
            proj3d: StackGrads::zeros_like(&params.proj3d),
            fuse: StackGrads::zeros_like(&params.fuse),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.proj2d.flatten();
        v.extend(self.proj3d.flatten());
        v.extend(self.fuse.flatten());
        v
    }

    pub fn is_zero(&self) -> bool {
        self.proj2d.is_zero() && self.proj3d.is_zero() && self.fuse.is_zero()
    }
}

fn normalize_rows(m: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let mut out = m.clone();
    let mut norms = Array1::zeros(m.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > ZERO_NORM) {
            return Err(CscError::Training(format!("mixed prototype row {i} has zero norm")));
        }
        row /= n;
        norms[i] = n;
    }
    Ok((out, norms))
}

/// Fills `projected2d`, `projected3d` and `mix` of a copy of `bank`.
pub fn blend(bank: &PrototypeBank, params: &BlendParams) -> Result<(PrototypeBank, BlendCache)> {
    let (p2, c2) = params.proj2d.forward(bank.p2d.view())?;
    let (p3, c3) = params.proj3d.forward(bank.p3d.view())?;
    let cat = concatenate(Axis(1), &[p2.view(), p3.view()]).expect("row counts match");
    let (fused, cf) = params.fuse.forward(cat.view())?;
    let (mix, norms) = normalize_rows(&fused)?;
    let mut out = bank.clone();
    out.projected2d = Some(p2);
    out.projected3d = Some(p3);
    out.mix = Some(mix.clone());
    Ok((out, BlendCache { proj2d: c2, proj3d: c3, fuse: cf, mix, norms }))
}

/// Parameter gradients given `dL/d(mix)`. The prototype inputs are
/// detached, so no gradient is returned for them.
pub fn blend_backward(upstream: ArrayView2<f64>, cache: &BlendCache, params: &BlendParams) -> Result<BlendGrads> {
    if upstream.dim() != cache.mix.dim() {
        return Err(CscError::shape("blend_backward upstream", format!("{:?}", cache.mix.dim()), format!("{:?}", upstream.dim())));
    }
    let mut dfused = upstream.to_owned();
    for (i, mut g) in dfused.rows_mut().into_iter().enumerate() {
        let y = cache.mix.row(i);
        let radial = y.dot(&g);
        g.zip_mut_with(&y, |gv, &yv| *gv = (*gv - yv * radial) / cache.norms[i]);
    }
    let (fuse, dcat) = params.fuse.backward(dfused.view(), &cache.fuse)?;
    let d = params.dim();
    let (proj2d, _) = params.proj2d.backward(dcat.slice(s![.., ..d]), &cache.proj2d)?;
    let (proj3d, _) = params.proj3d.backward(dcat.slice(s![.., d..]), &cache.proj3d)?;
    Ok(BlendGrads { proj2d, proj3d, fuse })
}

/// Mixed prototypes taken directly from the normalized raw 3D prototypes,
/// skipping blending. Used by the raw-prototype ablation arm.
pub fn raw_mix(bank: &PrototypeBank) -> Result<PrototypeBank> {
    let (mix, _) = normalize_rows(&bank.p3d)?;
    let mut out = bank.clone();
    out.mix = Some(mix);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embednet::DenseLayer;
    use ndarray::array;

    fn affine(w: Array2<f64>) -> DenseStack {
        let b = Array1::zeros(w.nrows());
        DenseStack::new(vec![DenseLayer::new(w, b, Activation::Identity).unwrap()]).unwrap()
    }

    fn bank() -> PrototypeBank {
        PrototypeBank {
            classes: vec![0, 3],
            p2d: array![[0.3, 0.4], [-1.0, 2.0]],
            p3d: array![[0.0, -0.5], [0.2, 0.1]],
            count2d: vec![1, 1],
            count3d: vec![1, 1],
            projected2d: None,
            projected3d: None,
            mix: None,
        }
    }

    fn selector(first: bool) -> BlendParams {
        let mut w = Array2::zeros((2, 4));
        let off = if first { 0 } else { 2 };
        w[[0, off]] = 1.0;
        w[[1, off + 1]] = 1.0;
        BlendParams::new(affine(Array2::eye(2)), affine(Array2::eye(2)), affine(w)).unwrap()
    }

    #[test]
    fn selectors_pick_one_modality() {
        let (out, _) = blend(&bank(), &selector(true)).unwrap();
        let mix = out.mix.unwrap();
        assert!((mix[[0, 0]] - 0.6).abs() < 1e-15 && (mix[[0, 1]] - 0.8).abs() < 1e-15);
        let (out, _) = blend(&bank(), &selector(false)).unwrap();
        let mix = out.mix.unwrap();
        assert_eq!(mix.row(0).to_vec(), vec![0.0, -1.0]);
        let n = (0.2f64 * 0.2 + 0.1 * 0.1).sqrt();
        assert!((mix[[1, 0]] - 0.2 / n).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let params = selector(true);
        let (_, cache) = blend(&bank(), &params).unwrap();
        let g = blend_backward(Array2::zeros((2, 2)).view(), &cache, &params).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn width_checks() {
        let bad = BlendParams::new(affine(Array2::eye(2)), affine(Array2::eye(3)), affine(Array2::zeros((2, 4))));
        assert!(bad.is_err());
    }

    #[test]
    fn stale_cache_detected() {
        let mut params = selector(true);
        let (_, cache) = blend(&bank(), &params).unwrap();
        params.fuse.layers_mut()[0].bias[0] = 0.1;
        assert!(matches!(
            blend_backward(Array2::ones((2, 2)).view(), &cache, &params),
            Err(CscError::StaleCache(_))
        ));
    }

    #[test]
    fn raw_mix_normalizes_p3d() {
        let out = raw_mix(&bank()).unwrap();
        let mix = out.mix.unwrap();
        assert_eq!(mix.row(0).to_vec(), vec![0.0, -1.0]);
    }
}
