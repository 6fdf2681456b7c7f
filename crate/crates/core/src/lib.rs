//! VQA-guided attentional text-to-image GAN.
//!
//! A multi-stage attention generator is conditioned on captions and on
//! concatenated question-answer texts; a stacked-attention VQA model scores
//! images generated from QA texts and its loss joins the adversarial and
//! image-text matching terms of the generator objective.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod damsm;
pub mod data;
pub mod discriminators;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod nn;
pub mod objectives;
pub mod seed;
pub mod text_encoder;
pub mod trainer;
pub mod vqa;

pub use candle_core::Tensor;
pub use error::{Error, Result};
