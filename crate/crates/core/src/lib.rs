//! Desk-scale pipeline for logit-guided image enhancement and difficulty-ordered
//! category learning: robust guide models, projected-gradient enhancement,
//! difficulty indexing, curriculum planning, an event-sourced session engine,
//! outcome statistics, and simulated prototype learners.

pub mod curriculum;
pub mod dataset;
pub mod difficulty;
pub mod enhance;
pub mod error;
pub mod expserve;
pub mod robusttrain;
pub mod simlearner;
pub mod statlab;
pub mod synth;
pub mod tensornet;

pub use error::{Error, Result};
