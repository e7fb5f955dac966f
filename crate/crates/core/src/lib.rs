//! Deformable lung-CT registration engine.
//!
//! The pipeline runs entirely on CPU: lung parenchyma segmentation and
//! pulmonary vessel enhancement, a dual-stream coarse-to-fine cascade with
//! inter-layer flow composition and stationary-velocity-field integration,
//! landmark evaluation, and voxelwise lesion-change tracking.

pub mod aru;
pub mod cascade;
pub mod diffeo;
pub mod error;
pub mod field;
pub mod lesion;
pub mod metrics;
pub mod preprocess;
pub mod synth;
pub mod vol;

pub use error::{Error, Result};
pub use field::DisplacementField;
pub use vol::{IntensityWindow, Volume};
