//! Trace-driven KV-cache eviction engine.
//!
//! The crate replays recorded (or synthetic) per-head attention traces of a
//! chain-of-thought decode through a simulated, budget-limited KV cache and
//! scores the think/answer boundary state against answer-stage ground truth.
//!
//! Module map:
//! - [`trace`]: trace data model, file formats and the synthetic generator.
//! - [`policy`]: per-head cache state and the common policy interface.
//! - [`lrfu`]: attention-based LRFU compression with top-p hit detection.
//! - [`baselines`]: LRU, LFU, sink+window, accumulated-score, observation-window.
//! - [`allocator`]: utilization-driven layer/head budget reallocation.
//! - [`replay`]: the simulation driver.
//! - [`metrics`]: ground-truth labels, retention metrics and comparisons.

pub mod allocator;
pub mod baselines;
pub mod error;
pub mod lrfu;
pub mod metrics;
pub mod policy;
pub mod replay;
pub mod trace;

pub use error::{Error, ErrorClass};
