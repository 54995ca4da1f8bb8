use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{CscError, Result};

static NEXT_STACK_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine layer `y = act(x Wᵀ + b)` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(CscError::shape("dense layer bias", weight.nrows(), bias.len()));
        }
        Ok(DenseLayer { weight, bias, activation })
    }

    /// Uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; zero bias.
    pub fn xavier<R: Rng>(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-a..=a));
        DenseLayer { weight, bias: Array1::zeros(fan_out), activation }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// A chain of dense layers. An empty stack is the identity on `width`.
#[derive(Debug)]
pub struct DenseStack {
    layers: Vec<DenseLayer>,
    width: usize,
    id: u64,
    generation: u64,
}

impl Clone for DenseStack {
    fn clone(&self) -> Self {
        DenseStack {
            layers: self.layers.clone(),
            width: self.width,
            id: NEXT_STACK_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }
}

impl PartialEq for DenseStack {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width && self.layers == other.layers
    }
}

/// Activations recorded by [`DenseStack::forward`].
#[derive(Clone, Debug)]
pub struct StackCache {
    stack_id: u64,
    generation: u64,
    /// Input of each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl StackCache {
    pub fn rows(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    /// Sign pattern of every pre-activation; used to detect kinks in
    /// finite-difference checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|z| z.iter().map(|&v| v > 0.0)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackGrads {
    pub layers: Vec<LayerGrad>,
}

impl StackGrads {
    pub fn zeros_like(stack: &DenseStack) -> Self {
        StackGrads {
            layers: stack
                .layers
                .iter()
                .map(|l| LayerGrad { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.len()) })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &StackGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    /// Same order as [`DenseStack::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|&v| v == 0.0))
    }
}

impl DenseStack {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(CscError::Config("use DenseStack::identity for an empty stack".into()));
        };
        let width = first.fan_in();
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(CscError::shape("dense stack chaining", pair[0].fan_out(), pair[1].fan_in()));
            }
        }
        Ok(DenseStack { layers, width, id: NEXT_STACK_ID.fetch_add(1, Ordering::Relaxed), generation: 0 })
    }

    /// Zero-layer stack: the identity map on `width` columns.
    pub fn identity(width: usize) -> Self {
        DenseStack { layers: Vec::new(), width, id: NEXT_STACK_ID.fetch_add(1, Ordering::Relaxed), generation: 0 }
    }

    /// Xavier-initialised stack through `widths`; every layer but the last
    /// uses `hidden`.
    pub fn xavier<R: Rng>(widths: &[usize], hidden: Activation, last: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(CscError::Config(format!("need at least two widths, got {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| DenseLayer::xavier(widths[i], widths[i + 1], if i + 1 == n { last } else { hidden }, rng))
            .collect();
        DenseStack::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    /// Mutable access invalidates every outstanding cache.
    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.width, |l| l.fan_out())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Weights then bias per layer, row-major.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(CscError::shape("set_params", self.param_count(), values.len()));
        }
        let mut it = values.iter();
        for l in self.layers_mut() {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.width {
            return Err(CscError::shape("dense stack input", self.width, x.ncols()));
        }
        Ok(())
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            z.mapv_inplace(|v| l.activation.apply(v));
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, StackCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weight.t());
            z += &l.bias;
            let out = z.mapv(|v| l.activation.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        let cache = StackCache { stack_id: self.id, generation: self.generation, inputs, pre };
        Ok((a, cache))
    }

    /// Reverse-mode gradients given `dL/d(output)`.
    pub fn backward(&self, upstream: ArrayView2<f64>, cache: &StackCache) -> Result<(StackGrads, Array2<f64>)> {
        if cache.stack_id != self.id || cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(CscError::StaleCache("dense stack"));
        }
        if upstream.ncols() != self.output_width() {
            return Err(CscError::shape("dense stack upstream width", self.output_width(), upstream.ncols()));
        }
        if !self.layers.is_empty() && upstream.nrows() != cache.rows() {
            return Err(CscError::shape("dense stack upstream rows", cache.rows(), upstream.nrows()));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let act = l.activation;
            if act != Activation::Identity {
                g.zip_mut_with(&cache.pre[i], |gv, &z| *gv *= act.derivative(z));
            }
            let weight = g.t().dot(&cache.inputs[i]);
            let bias = g.sum_axis(Axis(0));
            g = g.dot(&l.weight);
            grads.push(LayerGrad { weight, bias });
        }
        grads.reverse();
        Ok((StackGrads { layers: grads }, g))
    }
}
