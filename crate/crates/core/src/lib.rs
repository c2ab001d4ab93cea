pub mod config;
pub mod energy;
mod error;
pub mod freq;
pub mod layers;
pub mod model;
pub mod neuron;
pub mod train;

pub use error::{Error, Result};
