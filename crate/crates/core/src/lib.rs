//! Conditional CycleGAN for translating histology patches between stain domains.

pub(crate) mod archive;
pub mod cli;
pub mod data;
pub mod domain;
pub mod eval;
pub mod inference;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod matting;
pub mod networks;
pub mod nn;
pub mod pool;
pub mod tensor;
pub mod training;

pub use domain::*;
pub use error::{Error, Result};
