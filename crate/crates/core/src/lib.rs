//! Learned query-plan cost model with uncertainty-aware ranking and
//! subtree-level explanations.
//!
//! This crate is `no_std` (it needs `alloc`). It holds the pure parts of the
//! model: the plan tree representation, node feature encoding, the
//! bidirectional graph-attention tree encoder with GRU aggregation, the cost
//! estimator and its losses, the subtree explainer and the evaluation metrics.
//! Everything that touches files, JSON or threads lives in the `reqo` crate.

#![no_std]
// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod autograd;
pub mod bigg;
pub mod encoder;
pub mod error;
pub mod estimator;
pub mod explainer;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod plan;
pub mod scaler;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ModelConfig, ReqoModel};
pub use plan::{PlanNode, PlanTree, PredicateAtom, PredicateCase, SubtreeRef};
