pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod network;
pub mod output;
pub mod quadrature;
pub mod stats;
pub mod theory;

pub use error::{Error, Modality, Result};
