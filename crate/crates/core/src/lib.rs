//! Box-prompted medical image segmentation at desk scale: a CNN side
//! branch and a miniature ViT encoder fused by attention-weighted
//! multi-scale blending, with the training, evaluation, and ablation
//! machinery built on an in-crate reverse-mode autodiff engine.

pub mod backbone;
pub mod cbrnet;
pub mod config;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::SegModel;
pub use tensor::{Graph, NodeId, Tensor};
