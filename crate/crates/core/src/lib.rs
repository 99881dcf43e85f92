//! Individual treatment effect estimation with a self-supervised
//! transformer encoder, Wasserstein adversarial balancing of treated and
//! control representations, and a two-branch outcome head.

pub mod adversary;
pub mod baselines;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod outcome;
pub mod param;
pub mod reconstruction;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
