//! Federated pre-training of one-block masked autoencoders, cascade assembly
//! into multi-block ViT classifiers, and the closed-form linear-reconstruction
//! analysis used to verify the training pipeline.

pub mod data;
pub mod config;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod cascade;
pub mod checkpoint;
pub mod linalg;
pub mod mae;
pub mod optim;
pub mod oracle;
pub mod nn;
pub mod param;
pub mod partition;
pub mod plan;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
