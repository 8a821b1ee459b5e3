//! Decoding the semantic class of viewed images from multichannel EEG.
//!
//! The pipeline runs notch and band-pass filtering ([`dsp`]), converts each
//! trial into a time-frequency image ([`tfd`]), and classifies it with a
//! residual CNN ([`nn`]) trained against ground-truth labels and, optionally,
//! the soft targets of a frozen image-feature teacher ([`distill`]).
//! Classical baselines live in [`baselines`]; metrics and Table-style
//! reports in [`metrics`]; the real-time decode simulator in [`stream`].

pub mod baselines;
pub mod dataset;
pub mod dsp;
pub mod distill;
pub mod error;
pub mod linear;
pub mod metrics;
pub mod nn;
pub mod tfd;
pub mod par;
pub mod pipeline;
pub mod stream;

pub use error::{Error, Result};
