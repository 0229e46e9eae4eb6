//! Deformation-then-texture facial expression editing.
//!
//! An image is edited towards a target Action-Unit code in two stages: a
//! deformation generator predicts a bounded per-pixel offset field that
//! geometrically warps the input, then a texture generator paints
//! appearance changes onto the warped image through an attention mask.

pub mod aucode;
pub mod autograd;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod nets;
pub mod trainer;
pub mod warpfield;

pub use error::{Error, Result};
