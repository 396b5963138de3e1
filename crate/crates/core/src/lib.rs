//! Pseudo-label correction for semantic segmentation.
//!
//! A segmentation network is trained on noisy pseudo labels with
//! image-level and pixel-level loss reweighting, per-pixel confidence is
//! estimated with Monte-Carlo dropout, confidently mismatched labels are
//! corrected, and a freshly initialized network is retrained on the
//! corrected set.

pub mod confidence;
pub mod correct;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod report;
pub mod scalar;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image64 = data::Image<f64>;
pub type ProbMap64 = data::ProbMap<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type ModelParams64 = net::ModelParams<f64>;
pub type Gradients64 = net::Gradients<f64>;
