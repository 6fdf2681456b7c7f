//! Image-quality, text-alignment and answerability metrics.

pub mod metrics;
mod report;

pub use metrics::{fid, inception_score, r_precision, ActivationSet};
pub use report::{evaluate_checkpoint, evaluate_models, generate_images, write_sample_grid, EvalModels, EvalReport};
