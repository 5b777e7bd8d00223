//! File formats, pipeline stages and the command line of SPADE.
//!
//! The numerics live in `spade-core`; this crate reads and writes banks and
//! model files, runs stages in parallel with rayon, and wires them into the
//! `spade` binary.

pub mod bags;
pub mod bank_io;
pub mod cli;
pub mod config;
pub mod error;
pub mod heatmap;
pub mod io;
pub mod models;
pub mod stages;
pub mod tensor;

pub use error::{Result, SpadeError};
