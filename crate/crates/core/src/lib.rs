//! Video captioning with a visual-aware attention, dual-stream LSTM decoder.
//!
//! The crate is layered bottom-up:
//!
//! * [`autodiff`]: tensors, a define-by-run tape, parameters, Adam, gradient
//!   checking and checkpoint files;
//! * [`nn`]: LSTM cells, linear layers and embeddings;
//! * [`encoder`], [`attention`], [`decoder`]: the captioning model;
//! * [`objective`] and [`inference`]: the mixed training loss, the epoch
//!   loop, and γ-mixed greedy / beam decoding;
//! * [`textdata`] and [`metrics`]: corpora, vocabularies, feature files,
//!   synthetic data, and BLEU-4 / ROUGE-L / CIDEr-D;
//! * [`experiment`]: corpus loading, evaluation, sweeps and the gradient
//!   check fixture shared by the command line and the tests;
//! * [`cli`]: the `vadd` command line.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to
//! `f64`, which is what training and gradient checking use.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod objective;
mod scalar;
pub mod textdata;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type AdamState = autodiff::AdamState<f64>;
pub type FeatureSequence = encoder::FeatureSequence<f64>;
