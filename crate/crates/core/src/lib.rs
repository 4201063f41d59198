//! Synthesis and numerical verification of Laakso-type metric measure spaces
//! built from target volume and walk-dimension profiles.

pub mod cli;
pub mod energy;
pub mod error;
pub mod scaling;
pub mod laakso;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
