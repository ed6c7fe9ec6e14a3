//! Dual-timescale soft prompts anchored to a federated prototype library.

pub mod alignment;
pub mod backbone;
pub mod config;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod metrics;
pub mod orchestrator;
pub mod par;
pub mod privacy;
pub mod prompt;
pub mod rng;
pub mod routing;
pub mod server;
pub mod theory;
pub mod world;

pub use error::{Error, Result};
