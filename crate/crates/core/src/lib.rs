//! Speaker recognition under data scarcity: MFCC extraction, character-level
//! generators over serialized MFCC rows, and a transfer-learned classifier.
//!
//! The pipeline runs audio → [`audio`] frames → [`mfcc`] vectors →
//! [`dataset`] rows, which feed both the generators ([`lstm`], [`gpt`]) and the
//! classifiers ([`classifier`], [`baselines`]). [`experiment`] wires the
//! stages into the per-subject run matrix.

pub mod audio;
pub mod baselines;
pub mod classifier;
pub mod dataset;
pub mod experiment;
pub mod gpt;
pub mod lstm;
pub mod mfcc;
pub mod nn;
pub mod seed;
pub mod synthetic;
pub mod text;

/// Number of cepstral coefficients per row.
pub const N_COEFFS: usize = 26;

/// Sample rate every clip is resampled to before feature extraction.
pub const PIPELINE_RATE: u32 = 16_000;
