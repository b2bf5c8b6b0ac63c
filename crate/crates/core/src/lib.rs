//! Masked parallel generation of multi-channel codec tokens from text and an
//! acoustic prompt, with a synthetic oracle-invertible corpus for testing.

pub mod batch;
pub mod data_synth;
pub mod duration_model;
pub mod error;
pub mod eval;
pub mod inference;
pub mod kernels;
pub mod kv;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod schedules;
pub mod smd_model;
pub mod token_grid;
pub mod training;

pub use error::{Error, Result};
