//! Simulation and processing chain for comparing volumetric, projected,
//! elevation-focused and central-slice ultrasound localization microscopy.

pub mod beamform;
pub mod config;
pub mod error;
pub mod forward;
pub mod geometry;
pub mod io;
pub mod localize;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod svdfilter;
pub mod waveform;

pub use error::{Error, Result};
