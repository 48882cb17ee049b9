//! Tools for diagnosing and removing spurious correlations in frozen
//! embedding spaces.
//!
//! * [`embstore`]: labeled embedding sets, the EMB1 file format, synthetic
//!   data with a planted shortcut, seeded splits.
//! * [`distiller`]: projection onto the orthogonal complement of a
//!   background subspace.
//! * [`probe`]: ERM, group-reweighted and zero-shot linear probes.
//! * [`metrics`]: per-group and worst-group accuracy reports.
//! * [`simaudit`]: cosine-similarity distribution of a query over an image set.
//! * [`refenc`]: a small differentiable text encoder with exact input gradients.
//! * [`promptcraft`]: inversion of a target vector to text through [`refenc`].

pub mod digest;
pub mod distiller;
pub mod embstore;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod probe;
pub mod promptcraft;
pub mod refenc;
pub mod rng;
pub mod simaudit;

pub use embstore::EmbeddingSet;
pub use error::{Error, ErrorKind, Result};
pub use linalg::Matrix;
