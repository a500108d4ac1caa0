//! Interpretable image classification head built on a two-level mixture of
//! von Mises-Fisher distributions over frozen patch embeddings.
//!
//! Patch embeddings are clustered into a handful of image prototypes by a
//! small transformer decoder; each prototype is classified against learnable
//! class prototypes, and per-patch label posteriors are max-pooled into image
//! scores. Every intermediate posterior doubles as an explanation.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod infer;
pub mod losses;
pub mod model;
pub mod prototypes;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vmf;

pub use config::{CarlForm, LossWeights, ModelConfig, TrainConfig};
pub use data::{Dataset, Image, Masks};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalReport};
pub use infer::{Explanation, Prediction};
pub use losses::LossBreakdown;
pub use model::ComfeModel;
pub use synth::{SyntheticData, SyntheticSpec};
pub use tensor::{Real, Tensor};
pub use train::{train, TrainState};
