pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod experiments;
pub mod expm;
pub mod gradcheck;
pub mod inference;
pub mod lie_train;
pub mod metrics;
pub mod nn;
pub mod operators;
pub mod optim;
pub mod rng;
pub mod semisup;

pub use error::{Error, Result};
