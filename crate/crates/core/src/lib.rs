pub mod ablation;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod inference_eval;
pub mod layers;
pub mod network;
pub mod objective;
pub mod phantom;
pub mod tensor_core;
pub mod trainer;

pub use error::{Error, Result};
