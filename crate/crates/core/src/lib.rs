//! Masked supervised learning (MSL) for multi-label image recognition.
//!
//! One weight-shared network sees every training image twice: once as is and
//! once with most of its pixels zeroed by an irregular binary mask. Both
//! predictions are supervised by the ground-truth labels and tied together by
//! a squared-L2 label-consistency term. At test time only the plain image is
//! used; the masked path exists purely to make the learned representation
//! robust to partial inputs.
//!
//! The crate is self-contained: tensors and autodiff ([`numerics`]), the
//! backbone ([`model`]), mask generation ([`masking`]), a synthetic
//! occluded-shapes dataset ([`data`]), the loss terms ([`loss`]), the trainer
//! ([`training`]), metrics ([`metrics`]), robustness evaluation
//! ([`evaluation`]) and the run configuration used by the CLI ([`config`]).

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod loss;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
