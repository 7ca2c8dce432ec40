//! Language-anchored multimodal embedding: every non-text modality is
//! aligned to a frozen text encoder through contrastive training.

pub mod config;
pub mod curation;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod lora;
pub mod loss;
pub mod params;
pub mod patching;
pub mod preproc;
pub mod seed;
pub mod tape;
pub mod tensor_file;
pub mod trainer;

pub use error::{Error, Result};
