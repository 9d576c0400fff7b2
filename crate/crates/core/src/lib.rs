//! Open-set deepfake attribution: contrastive encoder training, linear
//! classification and per-class open-set thresholds, with a synthetic
//! benchmark generator.

pub mod augment;
pub mod config;
pub mod datamodel;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod openset;
pub mod pipeline;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};
