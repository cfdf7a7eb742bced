//! Grasp translation between hand morphologies with a Schrödinger bridge
//! trained on entropic-OT-coupled Brownian bridges.

pub mod bridge;
pub mod costs;
pub mod error;
pub mod geometry;
pub mod matrix;
pub mod nets;
pub mod ot;
pub mod pipeline;
pub mod sampler;
pub mod wrench;

pub use error::{Error, Result};
