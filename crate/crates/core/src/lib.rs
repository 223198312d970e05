//! Multi-layer channel features for cascaded pedestrian detection.

pub mod bench;
pub mod cascade;
pub mod channels;
pub mod conv;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod image;
pub mod integral;
pub mod layers;
pub mod synth;

pub use error::{McfError, Result};
