//! Correlation-filter tracking with a learned convolutional feature stack.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod regression;
pub mod scale;
pub mod tensor;
pub mod tracker;

pub use config::{Config, Extractor, OfflineConfig, ScaleMode, SuiteConfig, TrackerConfig};
pub use error::{Error, Result};
pub use tensor::{DenseMap, Shape};
