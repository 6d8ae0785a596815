//! Renal VERDICT diffusion-MRI toolkit.
//!
//! Implements the three-compartment VERDICT tissue model (vascular
//! astrosticks, intracellular restricted sphere, extracellular ball),
//! self-supervised neural fitting of per-voxel parameters, classical
//! ADC/IVIM baselines, dual-network acquisition subsampling, synthetic
//! phantoms with a Monte Carlo oracle, and group statistics.

pub mod acquisition;
pub mod error;
pub mod fit;
pub mod nn;
pub mod phantom;
pub mod select;
pub mod signal;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
