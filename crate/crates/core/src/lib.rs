//! Training and evaluation harness for four-class brain-MRI classification
//! with pretrained convolutional backbones and a dense classification head.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
