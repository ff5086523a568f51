//! Streaming polyphonic pitch detection: audio in, MIDI note events out.
//!
//! The pipeline runs in three stages, each usable on its own:
//!
//! 1. [`frontend`] turns a mono sample stream into harmonic-stacked
//!    log-power constant-Q frames with bounded latency.
//! 2. [`network`] maps those frames to a two-channel piano roll
//!    (articulation + sustain) through a convolutional-recurrent model
//!    built from the hand-differentiated kernels in [`layers`], trained
//!    by [`trainer`] with Adam over truncated BPTT segments.
//! 3. [`pianoroll`] peak-picks the activations into note events, which
//!    [`midi`] serializes as Standard MIDI Files.
//!
//! [`synth`] generates labeled training clips by additive synthesis and
//! [`eval`] scores transcriptions both framewise and as note events.

pub mod audio;
pub mod cli;
pub mod config;
pub mod eval;
pub mod frontend;
pub mod layers;
pub mod midi;
pub mod network;
pub mod pianoroll;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;
pub use tensor::Tensor;
