//! Cross-scene semantic consistency pre-training for lidar/camera embeddings.
//!
//! The pipeline runs, per training step:
//!
//! 1. [`scenegen`]: deterministic synthetic frames with a semantic oracle
//!    (superpixels plus one class id per superpixel).
//! 2. [`projection`]: point to pixel projection and superpixel to superpoint
//!    association.
//! 3. [`embednet`]: small dense embedding networks for pixels and points,
//!    average-pooled and L2-normalized per region.
//! 4. [`protobank`]: per-class prototypes aggregated over every scene in the
//!    batch.
//! 5. [`blending`]: modality projection and per-class fusion into mixed
//!    prototypes.
//! 6. [`losses`]: region contrastive loss, prototype contrastive loss and the
//!    epoch-gated total.
//!
//! [`trainer`] drives the loop and the linear-probe evaluation, and
//! [`gradcheck`] validates every analytic gradient against central
//! differences.

pub mod blending;
pub mod cli;
pub mod embednet;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod losses;
pub mod projection;
pub mod protobank;
pub mod scenegen;
pub mod trainer;

pub use error::{CscError, FormatError, Result};
pub use exec::ExecMode;
