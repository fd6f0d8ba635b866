//! Adversarial-game training for binary forgery detectors.

pub mod attacks;
pub mod augment;
pub mod blur;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gradcheck;
pub mod harness;
pub mod jpeg;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
