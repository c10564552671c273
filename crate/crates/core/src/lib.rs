//! Stereo sound event localization and detection (SELD).
//!
//! The crate covers the whole pipeline: stereo to pseudo-FOA conversion and
//! log-mel + intensity features ([`frontend`]), the selective state-space
//! scan kernels ([`ssm`]), the BiMamba decoder block with asymmetric
//! convolutions ([`bimamba`]), the full CNN14 / BiMamba network ([`model`]),
//! Multi-ACCDOA targets ([`maccdoa`]), the track-permutation-invariant loss
//! ([`loss`]), location-dependent metrics ([`metrics`]), data ingestion and
//! synthesis ([`dataset`]) and a small trainer ([`train`]).

pub mod bimamba;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod frontend;
pub mod loss;
pub mod maccdoa;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod num;
pub mod ssm;
pub mod train;

pub use error::{Result, SeldError};
pub use num::Real;

/// Sample rate every clip is converted to before feature extraction.
pub const SAMPLE_RATE: u32 = 24_000;
/// Length of one training/evaluation clip in samples (5 s).
pub const CLIP_SAMPLES: usize = 120_000;
/// Label frames per 5 s clip (100 ms resolution).
pub const LABEL_FRAMES: usize = 50;
/// Number of sound event classes.
pub const N_CLASSES: usize = 13;
/// Multi-ACCDOA tracks per class.
pub const N_TRACKS: usize = 3;
