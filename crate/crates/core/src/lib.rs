//! Joint speech-text dialog pre-training: corpus handling, text and speech
//! front ends, encoders, pre-training objectives, fine-tuning heads and the
//! training loop.
#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod finetune;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod speech;
pub mod text;
pub mod train;

pub use error::{Result, SpectraError};
