//! Physics-gated latent ODE forecasting of rainfall extremes on synthetic
//! monsoon-like data.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` or `f64`).
//! The aliases below fix it to `f64`.

pub mod autodiff;
pub mod grid;
pub mod models;
pub mod scalar;
pub mod synthgen;
pub mod training;
pub mod verify;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type RainField = grid::RainField<f64>;
pub type PredictorStack = grid::PredictorStack<f64>;
pub type ThresholdMap = grid::ThresholdMap<f64>;
pub type ChannelStats = grid::ChannelStats<f64>;
pub type SampleSet = synthgen::SampleSet<f64>;
pub type Model = models::Model<f64>;
pub type Forecast = models::Forecast<f64>;
pub type WindowedSet = models::WindowedSet<f64>;
pub type Checkpoint = models::Checkpoint<f64>;
pub type Adam = training::Adam<f64>;
