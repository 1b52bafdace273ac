//! Trajectory prediction with motion query pairs, plus the data pipeline,
//! metrics and transfer-learning harness around it.

pub mod codec;
pub mod config;
pub mod error;
pub mod graph;
pub mod kmeans;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod report;
pub mod runconfig;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
