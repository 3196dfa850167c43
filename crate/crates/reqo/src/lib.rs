//! File formats, synthetic workloads, training, checkpoints and evaluation
//! around the `reqo-core` cost model.

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod oracle;
pub mod service;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use oracle::{Oracle, OracleConfig};
pub use train::{train, TrainingConfig};

// Training allocates and frees many short-lived buffers above the system
// allocator's mmap threshold.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
