//! Decoding of continuous kinematics from binned spike counts and
//! waveform-feature moments, with stepwise equation selection driven by
//! Schur-complement inverse updates.

pub mod cli;
pub mod datamodel;
pub mod decode;
pub mod encode;
pub mod error;
pub mod featurize;
pub mod linalg;
pub mod schur;
pub mod select;
pub mod simulate;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
