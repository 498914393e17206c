//! Dual ask-answer network: a single sequence transduction model that learns
//! question answering and question generation jointly over
//! question/context/answer triplets.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod generator;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod registry;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
