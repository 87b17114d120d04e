pub mod capacity;
pub mod cli;
pub mod codebook;
pub mod config;
pub mod error;
pub mod hrr;
pub mod pipeline;
pub mod probe;
pub mod problems;
pub mod provenance;
pub mod report;
pub mod seed;
pub mod surrogate;
pub mod trace;
pub mod workflow;

pub use error::{Error, Result};
