//! Central finite-difference checks of every analytic gradient.
//!
//! Each component is exercised on randomly sized, seeded instances with a
//! random linear read-out as the scalar objective where the component has no
//! scalar output of its own. Perturbations that flip a ReLU sign or change
//! which regions are valid are skipped, since the derivative is undefined
//! there.

use std::fmt;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blending::{blend, blend_backward, BlendParams};
use crate::embednet::{pool_backward, pool_regions, Activation, DenseStack, EmbeddingBank};
use crate::error::Result;
use crate::losses::{loss_pro, loss_sp};
use crate::protobank::PrototypeBank;
use crate::ExecMode;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_INSTANCES: usize = 100;
/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Embednet,
    Blending,
    LossSp,
    LossPro,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Embednet, Component::Blending, Component::LossSp, Component::LossPro];

    pub fn name(self) -> &'static str {
        match self {
            Component::Embednet => "embednet",
            Component::Blending => "blending",
            Component::LossSp => "loss_sp",
            Component::LossPro => "loss_pro",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub instances: usize,
    /// Test hook: scales this component's analytic gradient by 1.5.
    pub corrupt: Option<Component>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub component: Component,
    pub instances: usize,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped at kinks.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Instances whose evaluation raised an error.
    pub errors: Vec<String>,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.errors.is_empty() && self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentReport::passed)
    }

    pub fn failures(&self) -> Vec<Component> {
        self.components.iter().filter(|c| !c.passed()).map(|c| c.component).collect()
    }

    pub fn get(&self, component: Component) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.component == component)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.components {
            let _ = writeln!(
                out,
                "{:<9} {} instances={} checked={} skipped={} max_rel_err={:.3e}",
                c.component.name(),
                if c.passed() { "PASS" } else { "FAIL" },
                c.instances,
                c.checked,
                c.skipped,
                c.max_rel_err
            );
            for e in &c.errors {
                let _ = writeln!(out, "  error: {e}");
            }
        }
        out
    }
}

#[derive(Default)]
struct Tally {
    checked: usize,
    skipped: usize,
    max: f64,
}

impl Tally {
    fn compare(&mut self, analytic: f64, numeric: f64) {
        self.checked += 1;
        let e = relative_error(analytic, numeric);
        if e > self.max || e.is_nan() {
            self.max = if e.is_nan() { f64::INFINITY } else { e };
        }
    }
}

/// Runs every component with [`DEFAULT_INSTANCES`] instances.
pub fn gradcheck(seed: u64) -> GradcheckReport {
    gradcheck_with(seed, &GradcheckOptions { instances: DEFAULT_INSTANCES, corrupt: None }, ExecMode::default())
}

pub fn gradcheck_with(seed: u64, opts: &GradcheckOptions, mode: ExecMode) -> GradcheckReport {
    let components = Component::ALL
        .iter()
        .map(|&c| {
            let factor = if opts.corrupt == Some(c) { 1.5 } else { 1.0 };
            let results = mode.map_range(opts.instances, |i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((c.stream() << 32) | i as u64);
                match c {
                    Component::Embednet => check_embednet(&mut rng, factor),
                    Component::Blending => check_blending(&mut rng, factor),
                    Component::LossSp => check_loss_sp(&mut rng, factor),
                    Component::LossPro => check_loss_pro(&mut rng, factor),
                }
            });
            let mut report = ComponentReport {
                component: c,
                instances: opts.instances,
                checked: 0,
                skipped: 0,
                max_rel_err: 0.0,
                errors: Vec::new(),
            };
            for (i, r) in results.into_iter().enumerate() {
                match r {
                    Ok(t) => {
                        report.checked += t.checked;
                        report.skipped += t.skipped;
                        report.max_rel_err = report.max_rel_err.max(t.max);
                    }
                    Err(e) => report.errors.push(format!("instance {i}: {e}")),
                }
            }
            report
        })
        .collect();
    GradcheckReport { seed, components }
}

fn normal_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn unit_rows<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = normal_matrix(rng, rows, cols);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

fn random_stack<R: Rng>(rng: &mut R, input: usize, output: usize) -> Result<DenseStack> {
    let depth = rng.gen_range(1..=3);
    let mut widths = vec![input];
    for _ in 1..depth {
        widths.push(rng.gen_range(2..=6));
    }
    widths.push(output);
    let mut stack = DenseStack::xavier(&widths, Activation::Relu, Activation::Identity, rng)?;
    // Non-zero biases so hidden units are not all switched on together.
    let params: Vec<f64> = stack.params().iter().map(|&p| p + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
    stack.set_params(&params)?;
    Ok(stack)
}

/// Objective `Σ w ⊙ pool(stack(x))`, the readout of pooled, normalized
/// region embeddings.
fn pooled_objective(stack: &DenseStack, x: &Array2<f64>, groups: &[Vec<u32>], w: &Array2<f64>) -> Result<(f64, Vec<bool>, Vec<bool>)> {
    let (y, cache) = stack.forward(x.view())?;
    let pooled = pool_regions(y.view(), groups)?;
    Ok(((&pooled.rows * w).sum(), cache.relu_pattern(), pooled.valid))
}

/// Checks the parameters of a stack through pooling and normalization.
/// A stack without parameters passes vacuously.
pub fn check_stack(stack: &DenseStack, x: &Array2<f64>, groups: &[Vec<u32>], w: &Array2<f64>, factor: f64) -> Result<(usize, usize, f64)> {
    let t = stack_tally(stack, x, groups, w, factor)?;
    Ok((t.checked, t.skipped, t.max))
}

fn stack_tally(stack: &DenseStack, x: &Array2<f64>, groups: &[Vec<u32>], w: &Array2<f64>, factor: f64) -> Result<Tally> {
    let (y, cache) = stack.forward(x.view())?;
    let pooled = pool_regions(y.view(), groups)?;
    let dy = pool_backward(w.view(), &pooled, groups)?;
    let (grads, _) = stack.backward(dy.view(), &cache)?;
    let analytic = grads.flatten();
    let base_pattern = cache.relu_pattern();
    let base = stack.params();

    let mut tally = Tally::default();
    let mut probe = stack.clone();
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + STEP;
        probe.set_params(&p)?;
        let (fp, pat_p, val_p) = pooled_objective(&probe, x, groups, w)?;
        p[k] = base[k] - STEP;
        probe.set_params(&p)?;
        let (fm, pat_m, val_m) = pooled_objective(&probe, x, groups, w)?;
        if pat_p != base_pattern || pat_m != base_pattern || val_p != pooled.valid || val_m != pooled.valid {
            tally.skipped += 1;
            continue;
        }
        tally.compare(analytic[k] * factor, (fp - fm) / (2.0 * STEP));
    }
    Ok(tally)
}

fn check_embednet(rng: &mut ChaCha8Rng, factor: f64) -> Result<Tally> {
    let input = rng.gen_range(2..=6);
    let output = rng.gen_range(2..=5);
    let stack = random_stack(rng, input, output)?;
    let rows = rng.gen_range(4..=12);
    let x = normal_matrix(rng, rows, input);
    let regions = rng.gen_range(1..=4);
    let groups: Vec<Vec<u32>> = (0..regions)
        .map(|_| (0..rows as u32).filter(|_| rng.gen_bool(0.5)).collect())
        .collect();
    let w = normal_matrix(rng, regions, output);
    stack_tally(&stack, &x, &groups, &w, factor)
}

fn blend_objective(bank: &PrototypeBank, params: &BlendParams, w: &Array2<f64>) -> Result<(f64, Vec<bool>)> {
    let (out, cache) = blend(bank, params)?;
    Ok(((out.mix.expect("blend fills mix") * w).sum(), cache.relu_pattern()))
}

fn check_blending(rng: &mut ChaCha8Rng, factor: f64) -> Result<Tally> {
    let d = rng.gen_range(2..=5);
    let c = rng.gen_range(1..=5);
    let depth = rng.gen_range(1..=2);
    let mut params = BlendParams::xavier(d, depth, Activation::Relu, rng)?;
    for s in params.stacks_mut() {
        let p: Vec<f64> = s.params().iter().map(|&v| v + 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        s.set_params(&p)?;
    }
    let bank = PrototypeBank {
        classes: (0..c as u16).collect(),
        p2d: normal_matrix(rng, c, d),
        p3d: normal_matrix(rng, c, d),
        count2d: vec![1; c],
        count3d: vec![1; c],
        projected2d: None,
        projected3d: None,
        mix: None,
    };
    let w = normal_matrix(rng, c, d);

    let (_, cache) = blend(&bank, &params)?;
    let analytic = blend_backward(w.view(), &cache, &params)?.flatten();
    let base_pattern = cache.relu_pattern();

    let mut tally = Tally::default();
    let mut offset = 0;
    for s in 0..3 {
        let base = params.stacks()[s].params();
        let mut probe = params.clone();
        for k in 0..base.len() {
            let mut p = base.clone();
            p[k] = base[k] + STEP;
            probe.stacks_mut()[s].set_params(&p)?;
            let (fp, pat_p) = blend_objective(&bank, &probe, &w)?;
            p[k] = base[k] - STEP;
            probe.stacks_mut()[s].set_params(&p)?;
            let (fm, pat_m) = blend_objective(&bank, &probe, &w)?;
            if pat_p != base_pattern || pat_m != base_pattern {
                tally.skipped += 1;
                continue;
            }
            tally.compare(analytic[offset + k] * factor, (fp - fm) / (2.0 * STEP));
        }
        offset += base.len();
    }
    Ok(tally)
}

/// Compares an analytic gradient with central differences of `f` over the
/// listed coordinates of `x`.
fn check_matrix<F>(x: &Array2<f64>, coords: &[(usize, usize)], analytic: &Array2<f64>, factor: f64, tally: &mut Tally, f: F) -> Result<()>
where
    F: Fn(&Array2<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    for &(i, j) in coords {
        probe[[i, j]] = x[[i, j]] + STEP;
        let fp = f(&probe)?;
        probe[[i, j]] = x[[i, j]] - STEP;
        let fm = f(&probe)?;
        probe[[i, j]] = x[[i, j]];
        tally.compare(analytic[[i, j]] * factor, (fp - fm) / (2.0 * STEP));
    }
    Ok(())
}

fn all_coords(rows: &[usize], cols: usize) -> Vec<(usize, usize)> {
    rows.iter().flat_map(|&i| (0..cols).map(move |j| (i, j))).collect()
}

fn random_temperature(rng: &mut ChaCha8Rng, default: f64) -> f64 {
    if rng.gen_bool(0.5) {
        default
    } else {
        rng.gen_range(0.05..2.0)
    }
}

fn check_loss_sp(rng: &mut ChaCha8Rng, factor: f64) -> Result<Tally> {
    let q = rng.gen_range(2..=8);
    let d = rng.gen_range(2..=6);
    let tau = random_temperature(rng, 0.07);
    let mut valid2d = vec![true; q];
    if q > 2 && rng.gen_bool(0.3) {
        valid2d[rng.gen_range(0..q)] = false;
    }
    let bank = EmbeddingBank::new(unit_rows(rng, q, d), unit_rows(rng, q, d), valid2d, vec![true; q], vec![0; q])?;
    let valid = bank.valid_indices();
    let coords = all_coords(&valid, d);
    let base = loss_sp(&bank, tau)?;

    let mut tally = Tally::default();
    check_matrix(&bank.f2d, &coords, &base.grad2d, factor, &mut tally, |m| {
        let b = EmbeddingBank { f2d: m.clone(), ..bank.clone() };
        Ok(loss_sp(&b, tau)?.value)
    })?;
    check_matrix(&bank.f3d, &coords, &base.grad3d, factor, &mut tally, |m| {
        let b = EmbeddingBank { f3d: m.clone(), ..bank.clone() };
        Ok(loss_sp(&b, tau)?.value)
    })?;
    // Rows outside the loss must get exactly zero gradient.
    for i in (0..q).filter(|i| !valid.contains(i)) {
        let z = base.grad2d.row(i).iter().chain(base.grad3d.row(i).iter()).all(|&v| v == 0.0);
        tally.compare(if z { 0.0 } else { 1.0 }, 0.0);
    }
    Ok(tally)
}

fn check_loss_pro(rng: &mut ChaCha8Rng, factor: f64) -> Result<Tally> {
    let q = rng.gen_range(1..=8);
    let c = rng.gen_range(2..=6);
    let d = rng.gen_range(2..=6);
    let tau = random_temperature(rng, 1.0);
    let classes: Vec<u16> = (0..c as u16).map(|k| 2 * k + 1).collect();
    let signs: Vec<u16> = (0..q).map(|_| classes[rng.gen_range(0..c)]).collect();
    let mut valid3d = vec![true; q];
    if q > 1 && rng.gen_bool(0.3) {
        valid3d[rng.gen_range(0..q)] = false;
    }
    let bank = EmbeddingBank::new(unit_rows(rng, q, d), unit_rows(rng, q, d), vec![true; q], valid3d, signs)?;
    let mix = unit_rows(rng, c, d);
    let protos = PrototypeBank {
        classes,
        p2d: mix.clone(),
        p3d: mix.clone(),
        count2d: vec![1; c],
        count3d: vec![1; c],
        projected2d: None,
        projected3d: None,
        mix: Some(mix.clone()),
    };
    let base = loss_pro(&bank, &protos, tau)?;

    let mut tally = Tally::default();
    check_matrix(&bank.f3d, &all_coords(&bank.valid_indices(), d), &base.grad3d, factor, &mut tally, |m| {
        let b = EmbeddingBank { f3d: m.clone(), ..bank.clone() };
        Ok(loss_pro(&b, &protos, tau)?.value)
    })?;
    let rows: Vec<usize> = (0..c).collect();
    check_matrix(&mix, &all_coords(&rows, d), &base.grad_mix, factor, &mut tally, |m| {
        let p = PrototypeBank { mix: Some(m.clone()), ..protos.clone() };
        Ok(loss_pro(&bank, &p, tau)?.value)
    })?;
    Ok(tally)
}

#[cfg(test)]
fn zero_readout_grad(stack: &DenseStack, x: &Array2<f64>, groups: &[Vec<u32>]) -> Vec<f64> {
    let (y, cache) = stack.forward(x.view()).unwrap();
    let pooled = pool_regions(y.view(), groups).unwrap();
    let w = Array2::zeros(pooled.rows.dim());
    let dy = pool_backward(w.view(), &pooled, groups).unwrap();
    stack.backward(dy.view(), &cache).unwrap().0.flatten()
}
