//! Open-set semi-supervised learning on synthetic Gaussian benchmarks.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod contrastive;
pub mod dataset_io;
pub mod detect;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod label;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result};
