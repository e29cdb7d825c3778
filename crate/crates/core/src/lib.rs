//! State transition attention and the pieces needed to train and evaluate a
//! history-conditioned manipulation policy on a small grid task.
//!
//! The crate is `no_std` with `alloc`:
//!
//! - [`Tape`]: reverse-mode autodiff over dense [`Tensor`]s, plus [`AdamState`]
//! - [`attention`]: temporal cross-attention, state transition attention,
//!   causal self-attention and the [`attention::HistoryCache`]
//! - [`policy`]: encoder, decoder blocks, per-joint heads and the incremental
//!   [`policy::PolicySession`]
//! - [`env`]: the grid manipulation task, scripted expert and noise schedule
//! - [`training`]: sequence sampling, temporal masking, masked MSE, the epoch
//!   loop and the evaluation harness
//!
//! File formats, the command line and wall-clock benchmarks live in the
//! `sta-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod env;
mod error;
pub mod kernels;
mod optim;
pub mod policy;
pub mod rng;
mod tape;
mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use optim::AdamState;
pub use tape::{Tape, TapeStats, Var};
pub use tensor::Tensor;
