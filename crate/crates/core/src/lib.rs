//! End-to-end volumetric cerebral-aneurysm screening on TOF-MRA-like data:
//! a training-free vessel volume-of-interest extractor, an attention 3D U-Net
//! built on a from-scratch tensor engine, the detection post-processing, the
//! sensitivity / FPs-per-case evaluation protocol, and a deterministic
//! synthetic phantom generator for desk-scale experiments.

pub mod error;
pub mod volume;
pub mod voi;
pub mod tensor;
pub mod model;
pub mod phantom;
pub mod train;
pub mod detect;
pub mod eval;
pub mod io;
pub mod pipeline;

pub use error::{Error, Result};
