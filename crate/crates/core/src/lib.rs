//! A desk-scale laboratory for dynamic-rate KV-cache token pruning in
//! autoregressive decoders.
//!
//! The pipeline: a small decoder with a KV cache exposes per-head attention
//! weights at every generation step; attention shares over token segments
//! (sys / img / ins / res) feed a linear classifier over discretized
//! compression rates; Gumbel-Softmax picks a rate differentiably; the
//! resulting keep-mask is either multiplied into attention (training) or
//! applied by physically dropping cache entries (inference). Baseline
//! strategies and an analytical FLOPs model sit alongside for comparison.

pub mod costing;
pub mod engine;
pub mod error;
mod ioutil;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod pruner;
pub mod workload;

pub use error::{Error, Result};
