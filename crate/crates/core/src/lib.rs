pub mod checkpoint;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod evalbench;
pub mod optim;
pub mod redundancy;
pub mod retrieval;
pub mod slimming;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
