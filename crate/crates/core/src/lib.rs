//! Numerical core of the SPADE mixture-of-data-experts pipeline.
//!
//! Everything here is pure computation over in-memory banks and needs only
//! `alloc`: expression preprocessing, two-step K-means expert construction,
//! per-expert contrastive alignment with hand-derived gradients, expert
//! routing, gated-attention MIL heads, evaluation metrics and a synthetic
//! paired-modality generator. File formats, the CLI and parallel drivers live
//! in the `spade` crate.

#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod clustering;
pub mod corpus;
mod error;
pub mod experts;
pub mod linalg;
pub mod metrics;
pub mod mil;
pub mod nn;
pub mod rng;
pub mod routing;
pub mod synth;

pub use error::{Error, Result};
pub use linalg::Matrix;
