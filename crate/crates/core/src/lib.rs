//! Sparse-voxel windowed attention with per-domain conditioning, plus the
//! dataset discrepancy statistics used to motivate it.
//!
//! The crate is organized around the data path of the encoder:
//!
//! * [`scene`] — point-cloud ingestion (PLY), validation, synthetic scenes.
//! * [`voxel`] — sparse grids, hierarchies, window partitioning, pooling.
//! * [`encoding`] — quantized relative-signal lookup tables in four layouts.
//! * [`attention`] — windowed multi-head attention with encoding biases,
//!   per-domain prompts, analytic gradients, and a finite-difference check.
//! * [`domain`] — per-domain layer normalization and initial embedding.
//! * [`encoder`] — the assembled multi-stage model and its checkpoints.
//! * [`augment`] — signal-subset dataset expansion and batch mixing.
//! * [`stats`] — occupancy/variance histograms and the divergence metric.

pub mod attention;
pub mod augment;
pub mod domain;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod linalg;
pub mod scene;
pub mod stats;
pub mod voxel;

pub use error::{Error, Result};
