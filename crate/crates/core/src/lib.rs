//! SSVEP target identification.
//!
//! The pipeline runs raw multi-channel EEG through a bank of Chebyshev
//! band-pass filters (one sub-band per harmonic degree), then through a
//! five-layer network: sub-band combination, channel combination, a stride-2
//! two-tap convolution with ReLU, a length-10 FIR convolution and a softmax
//! classifier. Training happens in two stages (a global model over all
//! subjects, then per-subject fine-tuning) and evaluation follows a
//! leave-one-block-out protocol reporting accuracy and information transfer
//! rate.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod filterbank;
pub mod io;
pub mod network;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
