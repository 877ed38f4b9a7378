//! Self-evolving networks of neuron clusters.
//!
//! A [`Network`](topology::Network) is an ordered set of clusters joined by
//! learned directed connections. Inputs are encoded per cluster, propagated
//! in two passes (feedforward first, then a second pass that also carries
//! feedback signals), averaged, and read out by a linear head. Training
//! alternates AdamW steps with plateau-triggered structural mutations:
//! splitting, growing, connecting and pruning.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evolution;
pub mod forward;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
