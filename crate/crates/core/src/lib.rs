//! Noise-robust expressive unit-to-Mel acoustic modelling.
//!
//! The crate covers the full desk-scale pipeline: a synthetic corpus, feature
//! extraction (log-Mel, pitch, energy, discrete units), noise and SpecAugment
//! augmentation, an ECAPA-style expressivity encoder with a DINO projection
//! head, a FastSpeech2-style acoustic model with FiLM conditioning, the loss
//! family, the self-distillation engine, the two-stage trainer, inference and
//! evaluation, all driven by a single CLI.

pub mod acoustic;
pub mod audio;
pub mod augment;
pub mod cli;
pub mod config;
pub mod container;
pub mod corpus;
pub mod dino;
pub mod error;
pub mod evaluation;
pub mod expressivity;
pub mod features;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod training;

pub use error::{Error, Result};

/// Sample rate of every waveform handled by the pipeline.
pub const SAMPLE_RATE: u32 = 16_000;
/// Number of log-Mel bands.
pub const MEL_BANDS: usize = 80;
/// Dimension of the utterance-level expressivity embedding.
pub const EMBED_DIM: usize = 512;
