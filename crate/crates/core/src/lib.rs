pub(crate) mod container;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod mining;
pub mod tensor;

pub use error::{Error, Result};
