pub mod baselines;
pub mod config;
pub mod container;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod fisher;
pub mod localize;
pub mod numkit;
pub mod optim;
pub mod rng;
pub mod rundir;
pub mod subspace;
pub mod toytts;
pub mod unlearn;

pub use error::{CortisError, Result};
