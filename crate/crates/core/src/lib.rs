//! Lifelong model editing on a small decoder language model.
//!
//! Each editing turn extracts joint `[hidden ∥ output-gradient]` features at
//! the answer positions, standardizes them with per-module running moments
//! that persist across turns, and applies a closed-form ridge update to the
//! MLP projections. See [`editor::Editor`] for the turn pipeline.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod editor;
pub mod error;
pub mod eval;
pub mod features;
pub mod linalg;
pub mod model;
pub mod report;
pub mod stats;

pub use error::{Error, Result};
