//! Optimal-transport task selection for few-shot learning.
//!
//! Tasks are embedded by a small encoder, turned into fully connected graphs
//! and compared with a mixture of Wasserstein and Gromov-Wasserstein
//! distances. The encoder is trained self-supervised on positive pairs of
//! tasks; the trained target encoder then ranks source tasks by their
//! distance to a target task.

pub mod analysis;
mod binio;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod ot;
pub mod seed;
pub mod selector;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
