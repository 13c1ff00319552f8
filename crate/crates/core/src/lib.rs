pub mod annotation;
pub mod batch;
pub mod bench;
pub mod config;
pub mod conv4d;
pub mod correlation;
pub mod csfa;
pub mod decoder;
pub mod error;
pub mod extract;
pub mod flow;
pub mod grad;
pub mod kbc;
pub mod metrics;
pub mod pipeline;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod tensorfile;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
