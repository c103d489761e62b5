//! Knowledge transfer between brain-connectivity classification tasks with
//! spatio-temporal graph convolutional networks.
//!
//! The crate compares five ways of training a target classifier: from
//! scratch, fine-tuning a pre-trained extractor, multi-task learning,
//! meta-learning and meta-transfer of a self-supervised source task.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod model;
pub mod training;

pub use error::{Error, Result};
