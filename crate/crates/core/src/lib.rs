//! Human-in-the-loop part annotation for point clouds.
//!
//! Sparse seed clicks are propagated by geometric region growing, a small point-wise
//! segmentation network is fine-tuned on the partial labels, and the annotator corrects
//! mispredictions until the cloud is fully labeled. A simulated annotator drives the same
//! loop from ground truth to measure click cost.

pub mod datasets;
pub mod error;
pub mod experiment;
pub mod geom;
pub mod labels;
pub mod region;
pub mod session;

pub use error::{Error, Result};
pub mod nnet;
pub mod oracle;
pub mod trainer;
