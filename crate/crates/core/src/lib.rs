pub mod analytics;
pub mod checkpoint;
pub mod env;
pub mod error;
pub mod instance;
pub mod instancegen;
pub mod libio;
pub mod moe;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use instance::{DistLabel, Instance, Problem};
