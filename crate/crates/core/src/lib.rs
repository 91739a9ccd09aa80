//! Label-synchronous neural transducer.
//!
//! The crate is organised bottom-up:
//!
//! * [`numcore`]: matrices, reverse-mode differentiation, gradient checking.
//! * [`align`]: continuous integrate-and-fire (CIF) and the auto-regressive
//!   variant (AIF) that locates label boundaries from accumulated weights and
//!   extracts label representations by attention.
//! * [`ctc`]: CTC loss and streaming prefix scores.
//! * [`model`]: encoder, prediction network, joint network and training loss.
//! * [`decoder`]: streaming joint beam search with CTC prefix scores.
//! * [`adapt`]: LM pretraining and text-only adaptation of the prediction network.
//! * [`harness`]: synthetic domains, corpus files, training, WER and experiment runs.
//! * [`config`]: flat `key = value` configuration files.

pub mod adapt;
pub mod align;
pub mod config;
pub mod ctc;
pub mod decoder;
mod error;
pub mod harness;
pub mod model;
pub mod numcore;

pub use error::{Error, Result};
