pub mod adapter;
pub mod checkpoint;
pub mod detector;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod providers;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = engine::Tensor<f32>;
pub type Tensor64 = engine::Tensor<f64>;
pub type ParamSet32 = engine::ParamSet<f32>;
pub type ParamSet64 = engine::ParamSet<f64>;
pub type Graph32<'a> = engine::Graph<'a, f32>;
pub type Graph64<'a> = engine::Graph<'a, f64>;
pub type Sample32 = detector::Sample<f32>;
pub type Sample64 = detector::Sample<f64>;
pub type FeatureStack32 = adapter::FeatureStack<f32>;
