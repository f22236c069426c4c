//! Time-frequency source separation with real and complex ratio masks.

pub mod audio;
pub mod data;
pub mod error;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod stft;
pub mod train;

pub use error::{Error, Result};
pub use stft::{Spectrogram, StftParams, Waveform};
