//! Multi-task visual quantification laboratory.
//!
//! Procedurally synthesises scenes of target and non-target sprites, labels
//! them for set comparison, vague quantification, proportion estimation and
//! absolute counting, and trains hierarchically shared multi-task networks
//! on them with a small from-scratch network substrate.

pub mod config;
pub mod error;
pub mod ground_truth;
pub mod harness;
pub mod model;
pub mod numeric;
pub mod pretrain;
pub mod rng;
pub mod scene;
pub mod settings;

pub use error::{Error, Result};
