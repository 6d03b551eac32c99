//! Binaural source separation with interaural coherence and early
//! reflection models.

pub mod acoustics;
pub mod dsp;
pub mod em;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod export;
pub mod grid;
pub mod init;
pub mod mixture;
pub mod models;
pub mod speech;
pub mod wav;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
