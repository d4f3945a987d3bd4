//! Unimodal aggregation (UMA) with a split module for non-autoregressive
//! sequence transduction, trained with self-conditioned intermediate CTC.
//!
//! The pipeline is: convolutional subsampling → high-rate encoder with
//! self-conditioning → per-frame UMA weights and valley segmentation →
//! weighted aggregation → low-rate encoder → split into two slots per
//! aggregated frame → CTC.

pub mod autodiff;
pub mod binfmt;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod split;
pub mod tensor;
pub mod train;
pub mod uma;

pub use autodiff::{Gradients, OpKind, Tape, Var};
pub use ctc::{LogProbs, TokenSeq, BLANK};
pub use error::{Error, Result};
pub use tensor::{ParamSet, Tensor};
