//! Zero-shot classification with a variational autoencoder whose latent prior
//! is a mixture of unit-covariance Gaussians, one per class, placed by a prior
//! network from the class attribute vector.
//!
//! Training runs in two phases. The model is first fitted on seen classes
//! only (the "mmVAE" baseline). It is then fine-tuned on minibatches that mix
//! real seen data with pseudo-unseen features sampled from the current model,
//! optionally with decoder dropout active while sampling.
//!
//! Classification is nearest prior mean in latent space (see [`classify`]).
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! it to `f64`, which is what the trainer, the file formats and the CLI use.

pub mod classify;
pub mod data;
pub mod error;
pub mod keyvalue;
pub mod loss;
pub mod model;
pub mod neuralcore;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense network with `f64` weights.
pub type Network = neuralcore::ParameterSet<f64>;
/// Gradient shaped like a [`Network`].
pub type NetworkGradient = neuralcore::Gradient<f64>;
/// Encoder, decoder and prior network with `f64` weights.
pub type Model = model::SgalModel<f64>;
pub type ModelGradient = model::ModelGradient<f64>;
pub type Dataset = data::Dataset<f64>;
pub type AttributeTable = data::AttributeTable<f64>;
pub type ClassTable = data::ClassTable<f64>;
pub type Loss = loss::LossBreakdown<f64>;
