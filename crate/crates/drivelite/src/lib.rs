//! A desk-scale vision-language driving stack.
//!
//! The pipeline turns per-frame visual features into a sparse set of kept
//! tokens (score + straight-through Gumbel mask), enhances them with a
//! memory bank of recent frames through a query-transformer aggregator,
//! and feeds the result, together with tokenized navigation instructions,
//! into a small transformer with decoupled instruction attention that
//! predicts future waypoints. PID controllers track the waypoints inside
//! a synthetic 2D world that reports route-completion / infraction /
//! driving-score metrics.
//!
//! Core math is generic over the scalar type (`f32` / `f64`); the
//! aliases below fix the compute precision used across the crate.

pub mod checkpoint;
pub mod config;
pub mod ddia;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod mefa;
pub mod nn;
pub mod pipeline;
pub mod reconstruct;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod sparsify;
pub mod tape;
pub mod tensor;

pub use error::Error;
pub use scalar::Scalar;

/// Compute-precision scalar: all training and gradient checks run in f64.
pub type Real = f64;
/// Checkpoint storage precision.
pub type StoreReal = f32;

/// Dense rank-2 array at compute precision.
pub type Tensor = tensor::Tensor2<Real>;
/// Autodiff tape at compute precision.
pub type Tape = tape::Tape<Real>;
/// Forward graph (tape + parameter bindings) at compute precision.
pub type Graph = tape::Graph<Real>;
/// Named parameter set at compute precision.
pub type ParamStore = nn::ParamStore<Real>;

pub type Result<T, E = Error> = std::result::Result<T, E>;
