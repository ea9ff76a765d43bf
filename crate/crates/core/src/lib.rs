//! Desk-scale simulator core for federated self-supervised learning under
//! backdoor attack: a small differentiable encoder engine, synthetic data and
//! trigger tooling, the federation protocol, model-poisoning and
//! data-poisoning attacks, embedding-inspection and robust-aggregation
//! defenses, and the measurement suite (KNN monitor, ASR, detection stats).
//!
//! The crate is `no_std` + `alloc`: every operation is pure compute over
//! owned buffers, seeded explicitly. File formats, configuration, and the
//! CLI live in the companion `fssl-sim` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attack;
pub mod cluster;
pub mod data;
pub mod defense;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod math;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod rng;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::CoreError;
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;
