//! Adversarial-robustness toolkit for speaker recognition.
//!
//! The crate bundles the pieces needed to study input-transformation and
//! adversarial-training defenses for a speaker classifier end to end:
//!
//! - [`audio`]: waveforms, 16-bit PCM WAV I/O, SNR and L_p metrics.
//! - [`dsp`]: time- and frequency-domain waveform transformations.
//! - [`codec`]: a toy CBR/VBR subband codec plus an external-codec adapter.
//! - [`grad`]: a small reverse-mode autodiff engine.
//! - [`features`]: the differentiable log-mel / MFCC front end.
//! - [`feco`]: feature compression via (warped) k-means, feature
//!   replication, and Griffin-Lim waveform reconstruction.
//! - [`model`]: a 1-D CNN speaker classifier with standard and adversarial
//!   training, enrollment, and cosine scoring.
//! - [`attacks`]: FGSM, PGD, CW variants, and NES / PSO / SSA black-box
//!   attacks.
//! - [`adaptive`]: BPDA, EOT, transform-aware query wrappers, and the
//!   feature-replication attacks against compression defenses.
//! - [`harness`]: synthetic speaker corpora, experiment configs, the
//!   attack-by-defense evaluation matrix, and report emission.

pub mod audio;
pub mod codec;
pub mod dsp;
pub mod error;
pub mod features;
pub mod feco;
pub mod grad;
pub mod harness;
pub mod adaptive;
pub mod attacks;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
