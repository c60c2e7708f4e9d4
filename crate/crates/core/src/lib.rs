pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod momentum;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
