//! Request-level mixture-of-experts engine.
//!
//! Whole requests are routed to a sparse subset of frozen experts, their
//! hidden states are projected into a shared width and fused, and a small
//! head scores relevance. Router, projections and head train end to end;
//! inference runs as a three-stage batch pipeline.

pub mod config;
pub mod datagen;
pub mod error;
pub mod experts;
pub mod fusion;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod router;
pub mod trainer;

pub use error::{Error, Result};
