//! A small gradient-based meta-learning engine built from scratch: dense
//! tensors with second-order reverse-mode autodiff, synthetic few-shot
//! episode generation, inner/outer-loop training (second- and first-order),
//! trajectory-distance regularization between fast and slow adaptation paths,
//! and the diagnostic instruments to inspect curvature along inner loops.
//!
//! The companion guide under `book/` walks through each layer; its code
//! blocks compile and run as doc-tests of this crate.

pub mod autodiff;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod models;
pub mod objective;
pub mod params;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use autodiff::{AdGraph, GradMap, NodeId, Var};
pub use error::{Error, Result};
pub use objective::{grad, hvp, loss_value, HvpMode, LossFn};
pub use params::{BoundParams, ParamVector};
pub use rng::SplitRng;
pub use tensor::Tensor;

#[cfg(doctest)]
mod booktests;
