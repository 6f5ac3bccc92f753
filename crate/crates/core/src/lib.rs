//! Adversarial-training laboratory with hypersphere embedding.
//!
//! The crate is organized around a small dense-tensor tape engine
//! ([`tape`]), classifier heads that expose feature/weight normalization and
//! angular margins ([`model`]), the training and adversarial objectives of
//! the standard min-max frameworks ([`objectives`]), a first-order and
//! zeroth-order attack suite ([`attacks`]), the outer training loops
//! ([`trainer`]), numerical verification of the gradient identities the
//! whole construction rests on ([`analysis`]), and dataset plumbing
//! ([`data`]).

pub mod analysis;
pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fdcheck;
pub mod model;
pub mod objectives;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
