//! `CSCW` parameter checkpoints.
//!
//! ```text
//! "CSCW" | version u32 | layer count u32
//! per layer: rows u32 | cols u32 | weights rows·cols f64 row-major | bias rows f64
//! ```
//!
//! Activations are architectural and not stored; layers are loaded into
//! stacks built from the same configuration.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::DenseStack;
use crate::error::{CscError, FormatError, FormatErrorKind, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSCW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

pub fn encode_checkpoint(stacks: &[&DenseStack]) -> Vec<u8> {
    let layers: Vec<_> = stacks.iter().flat_map(|s| s.layers()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        out.extend_from_slice(&(l.weight.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(l.weight.ncols() as u32).to_le_bytes());
        for v in l.weight.iter().chain(l.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<StoredLayer>, FormatError> {
    let mut pos = 0usize;
    let mut take = |n: Option<usize>, section: &str| -> Result<&[u8], FormatError> {
        match n.and_then(|n| pos.checked_add(n)) {
            Some(end) if end <= bytes.len() => {
                let s = &bytes[pos..end];
                pos = end;
                Ok(s)
            }
            _ => Err(FormatError { offset: pos as u64, kind: FormatErrorKind::Truncated { section: section.into() } }),
        }
    };
    let word = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));

    let magic: [u8; 4] = take(Some(4), "magic")?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError { offset: 0, kind: FormatErrorKind::BadMagic { expected: CHECKPOINT_MAGIC, found: magic } });
    }
    let version = word(take(Some(4), "version")?);
    if version != CHECKPOINT_VERSION {
        return Err(FormatError {
            offset: 4,
            kind: FormatErrorKind::VersionMismatch { expected: CHECKPOINT_VERSION, found: version },
        });
    }
    let count = word(take(Some(4), "header")?) as usize;
    let mut layers = Vec::new();
    for i in 0..count {
        let section = format!("layer {i}");
        let rows = word(take(Some(4), &section)?) as usize;
        let cols = word(take(Some(4), &section)?) as usize;
        let n = rows.checked_mul(cols);
        let raw = take(n.and_then(|n| n.checked_add(rows)).and_then(|n| n.checked_mul(8)), &section)?;
        let mut vals = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let weight = Array2::from_shape_fn((rows, cols), |_| vals.next().expect("sized"));
        let bias = Array1::from_iter(vals);
        layers.push(StoredLayer { weight, bias });
    }
    if pos != bytes.len() {
        return Err(FormatError { offset: pos as u64, kind: FormatErrorKind::TrailingBytes((bytes.len() - pos) as u64) });
    }
    Ok(layers)
}

/// Copies stored layers, in order, into `stacks`. Shapes must match exactly.
pub fn load_into(stacks: &mut [&mut DenseStack], layers: &[StoredLayer]) -> Result<()> {
    let expected: usize = stacks.iter().map(|s| s.layers().len()).sum();
    if expected != layers.len() {
        return Err(CscError::shape("checkpoint layer count", expected, layers.len()));
    }
    let mut it = layers.iter();
    for stack in stacks.iter_mut() {
        for (i, stored) in stack.layers().iter().map(|l| l.weight.dim()).enumerate().collect::<Vec<_>>() {
            let src = it.next().expect("count checked");
            if src.weight.dim() != stored {
                return Err(CscError::shape("checkpoint layer", format!("{stored:?}"), format!("{:?}", src.weight.dim())));
            }
            let layer = &mut stack.layers_mut()[i];
            layer.weight.assign(&src.weight);
            layer.bias.assign(&src.bias);
        }
    }
    Ok(())
}

pub fn write_checkpoint(stacks: &[&DenseStack], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(stacks))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<StoredLayer>> {
    Ok(decode_checkpoint(&fs::read(path)?)?)
}
