//! Low-rank PHM mixture-of-experts adapters with redundancy regularization,
//! trained on a desk-scale encoder-decoder transformer.

pub mod audit;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod matrix;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod phm;
pub mod protocol;
pub mod regularizer;
pub mod report;
pub mod rsa;
pub mod seed;
pub mod tasks;

pub use error::{Error, Result};
pub use matrix::Matrix;
