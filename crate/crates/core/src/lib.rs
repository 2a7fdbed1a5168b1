pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod ppo;
pub mod rng;

pub use error::{Error, Result};
