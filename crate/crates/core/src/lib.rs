//! Scale-aware image pretraining: multi-scale views, a patch-token encoder,
//! an expert encoder, matching/reconstruction/search objectives, the
//! training loop and evaluation probes.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod expert;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod run;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use crate::config::ExperimentConfig;
pub use crate::error::{Result, SaipError};
pub use crate::scalar::Scalar;
pub use crate::tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ImageView32 = data::image::ImageView<f32>;
pub type ImageView64 = data::image::ImageView<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type EncoderBundle32 = probe::EncoderBundle<f32>;
pub type EncoderBundle64 = probe::EncoderBundle<f64>;
