//! Sparse mixture-of-experts routing with finite per-expert buffers.
//!
//! This crate is the allocation-only core of `moebuf`: a small deterministic
//! numeric kernel, the MoE layer, batch-order dependent routing strategies,
//! a toy decoder-only transformer built from them, and the black-box
//! random-search adversary that exploits shared expert buffers.
//!
//! Everything here is `no_std` + `alloc`. File formats, experiment
//! scenarios and the command line live in the companion `moebuf` crate.

#![no_std]

extern crate alloc;

pub mod attack;
pub mod error;
pub mod model;
pub mod moe;
pub mod rng;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ForwardOutput, ForwardTrace, ModelConfig, RoutingStrategy, ToyModel};
pub use moe::{buffer_capacity, BatchShape, MoEConfig, MoELayerParams};
pub use rng::Rng;
pub use routing::{ExpertBufferState, GateMatrix, RoutingPlan};
pub use tensor::Matrix;
