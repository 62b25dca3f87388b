//! Continual conversion-rate learning under delayed feedback.

pub mod datagen;
pub mod domain;
pub mod error;
pub mod ingest;
pub mod learners;
pub mod model;
pub mod pipelines;
mod scalar;
pub mod sim;

pub use domain::{
    final_label, matured_subset, observed_label, Feature, FeatureVec, ImpressionRecord, SimClock, Split,
    TaskSchedule, Timestamp, DAY, HOUR,
};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network32 = model::Network<f32>;
pub type Network64 = model::Network<f64>;
