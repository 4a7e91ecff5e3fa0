//! Atlas-prompted segmentation of 3D volumes.
//!
//! The pipeline registers age-matched atlases onto a subject volume, turns the
//! warped atlas images and label templates into per-slice dense and box prompts
//! for a small promptable 2D segmentation network, lifts the per-orientation
//! predictions back to 3D and fuses them with STAPLE.
//!
//! Modules map onto the stages:
//!
//! - [`volume`]: geometric volumes, NIfTI / raw I/O, resampling, slicing.
//! - [`registration`]: rigid + affine registration with local NCC.
//! - [`prompt`]: atlas selection, prompt stacks, box prompts.
//! - [`neural`]: encoders, dense prompt encoder, mask decoder, training.
//! - [`fusion`]: lifting 2D predictions and STAPLE fusion.
//! - [`metrics`]: DSC, Jaccard, MSD, HD95, ICC(2,1) and reports.
//! - [`phantom`]: synthetic atlas series and subjects with ground truth.

pub mod error;
pub mod fusion;
pub mod metrics;
pub mod neural;
pub mod par;
pub mod phantom;
pub mod prompt;
pub mod registration;
pub mod volume;

pub use error::{Error, Result};
