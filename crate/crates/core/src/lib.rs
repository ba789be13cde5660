//! Personalized contactless PPG measurement from a smartphone's front and
//! rear cameras.
//!
//! The rear camera, covered by a fingertip with the flash on, yields a contact
//! PPG waveform that serves as a self-supervised label. A two-branch
//! convolutional network with temporal shift reads the face video from the
//! front camera; a short labelled calibration recording adapts it to one
//! person through gradient-based meta-learning.
//!
//! Modules:
//!
//! - [`signal`]: waveform primitives (band-pass, spectra, heart rate).
//! - [`ingest`]: trial data model, frame decoding, synchronization, storage.
//! - [`labelgen`]: finger-PPG pseudo labels.
//! - [`pos`]: the plane-orthogonal-to-skin baseline.
//! - [`model`]: the two-branch network, its gradient and checkpoints.
//! - [`meta`]: inner/outer-loop personalization and the fine-tune baseline.
//! - [`eval`]: metrics, the per-trial protocol and grouped reports.
//! - [`synth`]: synthetic ground-truth trials.

pub mod error;
pub mod eval;
pub mod ingest;
pub mod labelgen;
pub mod meta;
pub mod model;
pub mod pos;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
pub use signal::{PowerSpectrum, Waveform};
