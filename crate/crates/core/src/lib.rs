//! Salience-driven KV cache policy toolkit.
//!
//! The pieces, bottom up:
//! - [`attention`]: dense multi-head attention reference math;
//! - [`salience`]: block-decomposed per-token salience scores, as a dense
//!   oracle and a memory-bounded streaming pass;
//! - [`seh`]: the trainable salience estimation head (two-layer MLP with
//!   explicit backprop and an adaptive optimizer);
//! - [`cache`]: the bounded KV store with synchronized salience list and
//!   top-k / FIFO / random eviction;
//! - [`harness`]: a toy chunk-wise autoregressive rollout that exercises
//!   the cache policies and trains the head against a bidirectional
//!   teacher;
//! - [`metrics`]: argmax histograms, top-k overlap, retained attention
//!   mass;
//! - [`io`]: the PFKV tensor file format, run configuration, checkpoints.

pub mod attention;
pub mod cache;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod rank;
pub mod rng;
pub mod salience;
pub mod seh;
pub mod tensor;

pub use error::{Error, Result};
