//! Lightweight anchor-free object detection.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod augment;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod head;
pub mod kernels;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nas;
pub mod neck;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::ExperimentConfig;
pub use data::Dataset;
pub use error::{Error, Result};
pub use geometry::{BBox, LabeledBox};
pub use head::Detection;
pub use metrics::MapResult;
pub use model::{ModelConfig, PicoDet};
pub use nas::ArchGenotype;
pub use params::ParamStore;
pub use tensor::Tensor;
