//! Defect-image augmentation that mixes in-distribution samples from a
//! fine-tuned diffusion model with out-of-distribution samples made by
//! superimposing noise regions on normal images.

pub mod classifier;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fsutil;
pub mod hashing;
pub mod image;
pub mod ingest;
pub mod lora;
pub mod manifest;
pub mod mixer;
pub mod nn;
pub mod region;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
