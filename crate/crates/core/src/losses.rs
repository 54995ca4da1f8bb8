//! Contrastive objectives with exact gradients.
//!
//! * Region loss: InfoNCE between each superpoint embedding and every valid
//!   superpixel embedding in the batch, positive on the matching superpixel,
//!   summed over regions.
//! * Prototype loss: InfoNCE between each superpoint embedding and the mixed
//!   prototypes of all present classes, positive on its own class, averaged
//!   over regions.
//! * Total: region loss plus the prototype loss once the epoch exceeds
//!   `lambda`.

use ndarray::{Array2, ArrayView2, Axis};

use crate::embednet::EmbeddingBank;
use crate::error::{CscError, Result};
use crate::protobank::PrototypeBank;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub tau_sp: f64,
    pub tau_pro: f64,
    /// Prototype loss is active for epochs `n > lambda`.
    pub lambda: u32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau_sp: 0.07, tau_pro: 1.0, lambda: 5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_sp > 0.0 && self.tau_sp.is_finite()) {
            return Err(CscError::Config(format!("tau_sp={} must be positive", self.tau_sp)));
        }
        if !(self.tau_pro > 0.0 && self.tau_pro.is_finite()) {
            return Err(CscError::Config(format!("tau_pro={} must be positive", self.tau_pro)));
        }
        Ok(())
    }
}

/// `1{n > lambda}`; epochs count from 1.
pub fn gate(epoch: u32, lambda: u32) -> bool {
    epoch > lambda
}

/// Row-wise softmax cross-entropy of `logits` against `targets`.
/// Returns per-row losses and `softmax - onehot`.
fn softmax_xent(logits: &Array2<f64>, targets: &[usize]) -> (Vec<f64>, Array2<f64>) {
    let mut grad = logits.clone();
    let mut losses = Vec::with_capacity(targets.len());
    for (mut row, &t) in grad.rows_mut().into_iter().zip(targets) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let target_logit = row[t];
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        losses.push((max - target_logit) + z.ln());
        row /= z;
        debug_assert!((row.sum() - 1.0).abs() < 1e-12, "softmax row sums to {}", row.sum());
        row[t] -= 1.0;
    }
    (losses, grad)
}

fn gather(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    m.select(Axis(0), rows)
}

fn scatter(rows: &[usize], values: ArrayView2<f64>, q: usize) -> Array2<f64> {
    let mut out = Array2::zeros((q, values.ncols()));
    for (k, &r) in rows.iter().enumerate() {
        out.row_mut(r).assign(&values.row(k));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpLoss {
    pub value: f64,
    /// `Q × D`; zero on invalid rows.
    pub grad2d: Array2<f64>,
    pub grad3d: Array2<f64>,
    /// Mean similarity of matched pairs.
    pub mean_pos_sim: f64,
    /// Mean over regions of the largest unmatched similarity.
    pub mean_negmax_sim: f64,
}

/// Region contrastive loss over all valid rows of `bank`.
pub fn loss_sp(bank: &EmbeddingBank, tau: f64) -> Result<SpLoss> {
    let valid = bank.valid_indices();
    let n = valid.len();
    if n < 2 {
        return Err(CscError::DegenerateBatch { valid: n });
    }
    let a3 = gather(&bank.f3d, &valid);
    let a2 = gather(&bank.f2d, &valid);
    let sims = a3.dot(&a2.t());
    let logits = &sims / tau;
    let targets: Vec<usize> = (0..n).collect();
    let (losses, g) = softmax_xent(&logits, &targets);

    let grad3 = g.dot(&a2) / tau;
    let grad2 = g.t().dot(&a3) / tau;

    let mean_pos_sim = (0..n).map(|i| sims[[i, i]]).sum::<f64>() / n as f64;
    let mean_negmax_sim = (0..n)
        .map(|i| (0..n).filter(|&j| j != i).map(|j| sims[[i, j]]).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n as f64;

    Ok(SpLoss {
        value: losses.iter().sum(),
        grad2d: scatter(&valid, grad2.view(), bank.len()),
        grad3d: scatter(&valid, grad3.view(), bank.len()),
        mean_pos_sim,
        mean_negmax_sim,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProLoss {
    pub value: f64,
    /// `Q × D`; zero on invalid rows.
    pub grad3d: Array2<f64>,
    /// `C × D`, aligned with the prototype bank rows.
    pub grad_mix: Array2<f64>,
}

/// Prototype contrastive loss of every valid superpoint against the mixed
/// prototypes in `protos`.
pub fn loss_pro(bank: &EmbeddingBank, protos: &PrototypeBank, tau: f64) -> Result<ProLoss> {
    let mix = protos
        .mix
        .as_ref()
        .ok_or_else(|| CscError::Training("prototype bank has no mixed prototypes".into()))?;
    if mix.ncols() != bank.dim() {
        return Err(CscError::shape("loss_pro prototype width", bank.dim(), mix.ncols()));
    }
    let valid = bank.valid_indices();
    let n = valid.len();
    if n == 0 {
        return Err(CscError::DegenerateBatch { valid: 0 });
    }
    let targets = valid
        .iter()
        .map(|&q| protos.row_of(bank.signs[q]).ok_or(CscError::MissingClass(bank.signs[q])))
        .collect::<Result<Vec<_>>>()?;
    let a3 = gather(&bank.f3d, &valid);
    let logits = a3.dot(&mix.t()) / tau;
    let (losses, mut g) = softmax_xent(&logits, &targets);
    g /= n as f64;
    let grad3 = g.dot(mix) / tau;
    let grad_mix = g.t().dot(&a3) / tau;
    Ok(ProLoss {
        value: losses.iter().sum::<f64>() / n as f64,
        grad3d: scatter(&valid, grad3.view(), bank.len()),
        grad_mix,
    })
}

/// One CSV row of training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub loss_sp: f64,
    /// Zero when gated off.
    pub loss_pro: f64,
    pub total: f64,
    pub gate: bool,
    pub mean_pos_sim: f64,
    pub mean_negmax_sim: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,epoch,gate,loss_sp,loss_pro,total,mean_pos_sim,mean_negmax_sim";

    pub fn csv_row(&self, step: u64, epoch: u32) -> String {
        format!(
            "{step},{epoch},{},{},{},{},{},{}",
            u8::from(self.gate),
            self.loss_sp,
            self.loss_pro,
            self.total,
            self.mean_pos_sim,
            self.mean_negmax_sim
        )
    }
}

/// Combined loss and gradients for one step.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub report: LossReport,
    pub grad2d: Array2<f64>,
    pub grad3d: Array2<f64>,
    /// Gradient on the mixed prototypes, when the prototype loss ran.
    pub grad_mix: Option<Array2<f64>>,
}

/// Gates the prototype loss on the epoch. `pro` is only invoked when the
/// gate is open.
pub fn total_loss<F>(epoch: u32, sp: SpLoss, pro: F, cfg: &LossConfig) -> Result<TotalLoss>
where
    F: FnOnce() -> Result<ProLoss>,
{
    if epoch == 0 {
        return Err(CscError::Config("epochs are numbered from 1".into()));
    }
    let open = gate(epoch, cfg.lambda);
    let mut grad3d = sp.grad3d;
    let (loss_pro, grad_mix) = if open {
        let p = pro()?;
        grad3d += &p.grad3d;
        (p.value, Some(p.grad_mix))
    } else {
        (0.0, None)
    };
    Ok(TotalLoss {
        report: LossReport {
            loss_sp: sp.value,
            loss_pro,
            total: sp.value + loss_pro,
            gate: open,
            mean_pos_sim: sp.mean_pos_sim,
            mean_negmax_sim: sp.mean_negmax_sim,
        },
        grad2d: sp.grad2d,
        grad3d,
        grad_mix,
    })
}
