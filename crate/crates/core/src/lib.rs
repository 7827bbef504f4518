//! Conditional graph diffusion for commuting origin–destination matrices,
//! with gravity baselines, evaluation metrics, an urban-structure classifier
//! and a KernelSHAP explainer.

pub mod baselines;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod explainer;
pub mod graph_model;
pub mod io;
pub mod metrics;
pub mod registry;
pub mod rng;
pub mod sampler;
pub mod structure;
pub mod synth;

pub use error::{Error, Result};
pub use graph_model::{
    inverse_transform, log_transform, mask_features, City, CityMeta, Dataset, FlowSpace, NormStats, ODMatrix, Split,
    UrbanGraph,
};
