//! Automatic structured channel pruning under a FLOPs budget.
//!
//! A trained network is instrumented with per-channel multiplicative gates
//! (trainable bottlenecks). Only the gate parameters are optimized, against
//! cross-entropy plus a normalized FLOPs penalty; a threshold binary search
//! turns the trained gates into a pruning mask that meets the FLOPs target,
//! and the graph is then physically rewritten and finetuned.

pub mod ablation;
pub mod autodiff;
pub mod bottleneck;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod graph;
pub mod kendall;
pub mod kernels;
pub mod mask;
pub mod pipeline;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
