//! Sequence variational autoencoders with an LSTM encoder and decoder,
//! pluggable temporal aggregation of the encoder states, KL annealing,
//! an aggressive encoder-update schedule and a variational dual estimate
//! of the posterior KL.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! differentiation engine on `f64` tensors and [`nn`] builds the layers on
//! top of it.

pub mod aggregate;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dualkl;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vae;

pub use aggregate::{aggregate, AggregationMethod};
pub use error::{Error, Result};
pub use schedule::{AnnealConfig, AnnealKind, AnnealSchedule};
pub use tensor::{Graph, Tensor, Var};
pub use vae::{ModelConfig, VaeModel};
