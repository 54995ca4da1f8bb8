//! Cross-scene semantic prototypes.
//!
//! Every region carries a semantic sign from the oracle. The prototype of
//! class `t` in a modality is the plain mean of all valid region embeddings
//! with sign `t`, over every frame handed in, no matter which scene the
//! frame came from. Prototypes are detached: no gradient flows back into the
//! contributing embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};

use crate::embednet::EmbeddingBank;
use crate::error::{CscError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// Present class ids, ascending. Row `i` of every matrix is `classes[i]`.
    pub classes: Vec<u16>,
    pub p2d: Array2<f64>,
    pub p3d: Array2<f64>,
    pub count2d: Vec<usize>,
    pub count3d: Vec<usize>,
    /// Filled by blending.
    pub projected2d: Option<Array2<f64>>,
    pub projected3d: Option<Array2<f64>>,
    pub mix: Option<Array2<f64>>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.p2d.ncols()
    }

    pub fn row_of(&self, class: u16) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    /// One line per class: `id n2d n3d |P2d| |P3d|`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.classes.iter().enumerate() {
            let n2 = self.p2d.row(i).dot(&self.p2d.row(i)).sqrt();
            let n3 = self.p3d.row(i).dot(&self.p3d.row(i)).sqrt();
            let _ = writeln!(out, "{c} {} {} {n2:.6} {n3:.6}", self.count2d[i], self.count3d[i]);
        }
        out
    }
}

#[derive(Default)]
struct Accum {
    sum2d: Option<Array1<f64>>,
    sum3d: Option<Array1<f64>>,
    n2d: usize,
    n3d: usize,
}

/// Per-class means over all banks. Summation runs bank by bank, then row by
/// row, so the result is bit-deterministic for a given input order. Classes
/// missing from either modality are left out.
pub fn build_prototypes(banks: &[EmbeddingBank]) -> Result<PrototypeBank> {
    let Some(first) = banks.first() else {
        return Err(CscError::EmptyBank);
    };
    let d = first.dim();
    let mut acc: BTreeMap<u16, Accum> = BTreeMap::new();
    for bank in banks {
        if bank.dim() != d {
            return Err(CscError::shape("build_prototypes embedding width", d, bank.dim()));
        }
        for q in 0..bank.len() {
            let sign = bank.signs[q];
            if bank.valid2d[q] {
                let a = acc.entry(sign).or_default();
                let row = bank.f2d.row(q);
                match &mut a.sum2d {
                    Some(s) => *s += &row,
                    None => a.sum2d = Some(row.to_owned()),
                }
                a.n2d += 1;
            }
            if bank.valid3d[q] {
                let a = acc.entry(sign).or_default();
                let row = bank.f3d.row(q);
                match &mut a.sum3d {
                    Some(s) => *s += &row,
                    None => a.sum3d = Some(row.to_owned()),
                }
                a.n3d += 1;
            }
        }
    }
    let present: Vec<(u16, Accum)> = acc.into_iter().filter(|(_, a)| a.n2d > 0 && a.n3d > 0).collect();
    if present.is_empty() {
        return Err(CscError::EmptyBank);
    }
    let c = present.len();
    let mut p2d = Array2::zeros((c, d));
    let mut p3d = Array2::zeros((c, d));
    let mut classes = Vec::with_capacity(c);
    let mut count2d = Vec::with_capacity(c);
    let mut count3d = Vec::with_capacity(c);
    for (i, (class, a)) in present.into_iter().enumerate() {
        p2d.row_mut(i).assign(&(a.sum2d.expect("n2d > 0") / a.n2d as f64));
        p3d.row_mut(i).assign(&(a.sum3d.expect("n3d > 0") / a.n3d as f64));
        classes.push(class);
        count2d.push(a.n2d);
        count3d.push(a.n3d);
    }
    Ok(PrototypeBank { classes, p2d, p3d, count2d, count3d, projected2d: None, projected3d: None, mix: None })
}

/// Exponential moving average of two banks: `m·old + (1-m)·fresh` on shared
/// classes, others carried over from whichever bank has them. Blended
/// outputs are cleared.
pub fn ema_update(old: &PrototypeBank, fresh: &PrototypeBank, momentum: f64) -> Result<PrototypeBank> {
    if !(0.0..1.0).contains(&momentum) {
        return Err(CscError::Config(format!("ema momentum {momentum} must be in [0, 1)")));
    }
    if old.dim() != fresh.dim() {
        return Err(CscError::shape("ema_update prototype width", old.dim(), fresh.dim()));
    }
    let mut classes: Vec<u16> = old.classes.iter().chain(&fresh.classes).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let (c, d) = (classes.len(), old.dim());
    let mut out = PrototypeBank {
        classes: classes.clone(),
        p2d: Array2::zeros((c, d)),
        p3d: Array2::zeros((c, d)),
        count2d: vec![0; c],
        count3d: vec![0; c],
        projected2d: None,
        projected3d: None,
        mix: None,
    };
    for (i, &class) in classes.iter().enumerate() {
        match (old.row_of(class), fresh.row_of(class)) {
            (Some(o), Some(f)) => {
                out.p2d.row_mut(i).assign(&(&old.p2d.row(o) * momentum + &fresh.p2d.row(f) * (1.0 - momentum)));
                out.p3d.row_mut(i).assign(&(&old.p3d.row(o) * momentum + &fresh.p3d.row(f) * (1.0 - momentum)));
                out.count2d[i] = fresh.count2d[f];
                out.count3d[i] = fresh.count3d[f];
            }
            (Some(o), None) => {
                out.p2d.row_mut(i).assign(&old.p2d.row(o));
                out.p3d.row_mut(i).assign(&old.p3d.row(o));
                out.count2d[i] = old.count2d[o];
                out.count3d[i] = old.count3d[o];
            }
            (None, Some(f)) => {
                out.p2d.row_mut(i).assign(&fresh.p2d.row(f));
                out.p3d.row_mut(i).assign(&fresh.p3d.row(f));
                out.count2d[i] = fresh.count2d[f];
                out.count3d[i] = fresh.count3d[f];
            }
            (None, None) => unreachable!("class comes from one of the banks"),
        }
    }
    Ok(out)
}
