//! Biometric authentication from remote photoplethysmography (rPPG) morphology.
//!
//! The pipeline runs from facial video to an identity score:
//!
//! 1. [`ingest`] loads frames, landmarks and contact-PPG traces and crops faces.
//! 2. [`deid`] downsamples each frame to a 6×6 grid, permutes the cells with a
//!    per-video pattern and reshapes the result into a 36×T×3 spatiotemporal map.
//! 3. [`cp2d`] trains the rPPG extractor without labels using a contrastive loss
//!    on power spectral densities of patches from two videos.
//! 4. [`morph`] trains a shared morphology encoder on periodic pulse segments,
//!    alternating between an rPPG identity branch and an external contact-PPG
//!    identity branch, and scores windows of consecutive beats at inference.
//! 5. [`eval`] computes one-vs-rest EER/AUC per subject and the morphology
//!    correlation between extracted and contact pulse templates.
//!
//! [`synth`] generates subjects, videos and traces with known pulse morphology,
//! which is what the test suites and examples run against.

pub mod cli;
pub mod cp2d;
pub mod deid;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod morph;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
