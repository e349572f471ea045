//! Text-to-point-cloud place recognition and fine localization on CPU.

pub mod augment;
pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cloud;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod fine;
pub mod gradcheck;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scenegen;
pub mod ssm;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
