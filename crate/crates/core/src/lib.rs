//! Spectral channel-attention pruning for convolutional networks.
//!
//! Every numeric routine is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file pick `f64`, which is what the pipeline
//! and the CLI use.

pub mod autoencoder;
pub mod error;
pub mod field;
pub mod io;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod prune;
pub mod scalar;
pub mod scoring;
pub mod spectral;
pub mod theory;
pub mod tensor;

pub use autoencoder::{
    train_layer_autoencoder, AutoencoderParams, Branch, LayerAutoencoder, OptimizerKind, TrainConfig,
};
pub use error::{Result, ScapError};
pub use network::{Activation, ConvSpec, Cost, FeatureShape, Layer, LinearSpec, NetworkSpec, Topology};
pub use nn::{gradient_check, synthetic_dataset, ActivationPool, CapturePoint, Dataset, ModelState, TrainSchedule};
pub use prune::{compute_fr_pr, count_flops_params, propagate_and_apply, select_channels, KMin, PruneMask, PruneReport};
pub use field::{build_interaction_field, extract_aligned_channel, InteractionField};
pub use scalar::Scalar;
pub use scoring::{fidelity, fuse, normalize_layer_scores, score_layer, FusionKind, FusionRule, ImportanceVector, ScoreConfig};
pub use spectral::{destandardize_spectrum, fft2, ifft2, standardize_spectrum, SpectralStats};
pub use tensor::{bilinear_resize, CTensor4, Matrix, Shape4, Tensor4};

pub use pipeline::Run;

pub type Tensor = Tensor4<f64>;
pub type ComplexTensor = CTensor4<f64>;
pub type Autoencoder = AutoencoderParams<f64>;
pub type Model = ModelState<f64>;
pub type Tensor32 = Tensor4<f32>;
pub type ComplexTensor32 = CTensor4<f32>;
pub type Autoencoder32 = AutoencoderParams<f32>;
