//! Q-guided flow exploration for high-dimensional continuous control.

pub mod agent;
pub mod analysis;
pub mod config;
pub mod array;
pub mod critic;
pub mod envs;
pub mod error;
pub mod flow;
pub mod nn;
pub mod replay;
pub mod source_policy;
pub mod trainer;

pub use array::DenseArray;
pub use error::{QflowError, Result};
