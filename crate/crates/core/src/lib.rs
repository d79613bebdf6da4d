//! Keypoint detection, local description and global retrieval descriptors
//! computed from a single residual backbone.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod formats;
pub mod global_desc;
pub mod linalg;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
