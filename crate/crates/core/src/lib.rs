//! Counterfactual-composition diffusion for synthesizing remote-sensing
//! segmentation data.

pub mod cfcomp;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod embed;
pub mod error;
pub mod fsutil;
pub mod hash;
pub mod labelmap;
pub mod raster;
pub mod rfilter;
pub mod scalar;
pub mod stats;
pub mod synthesis;

pub use error::{Error, Result};
pub use raster::{Category, CategoryVocabulary, ClassId, Raster, SemanticMask, Triplet, BACKGROUND};
pub use scalar::Scalar;

pub type Denoiser32 = diffusion::Denoiser<f32>;
pub type Denoiser64 = diffusion::Denoiser<f64>;
pub type TrainState32 = diffusion::TrainState<f32>;
pub type TrainState64 = diffusion::TrainState<f64>;
