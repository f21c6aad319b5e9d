//! Scribble-supervised volumetric segmentation with a shared-encoder, multi-decoder
//! dilated network and pixel- and class-level consistency losses.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod preprocessing;
pub mod scalar;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Volume32 = data::Volume<f32>;
pub type Volume64 = data::Volume<f64>;
pub type ProbabilityMap32 = data::ProbabilityMap<f32>;
pub type ProbabilityMap64 = data::ProbabilityMap<f64>;
pub type TDNet32 = network::TDNet<f32>;
pub type TDNet64 = network::TDNet<f64>;
