//! Workbench for quantization-aware training of small reasoning models.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod packing;
pub mod ptq;
pub mod quant;
pub mod taskgen;
pub mod workflow;

pub use error::{Error, Result};
