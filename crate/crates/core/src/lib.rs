//! Plain-ViT semantic segmentation with training-only context replay and
//! a hidden-pyramid upsampler.
//!
//! The encoder runs its 16-pixel patch embedding at stride 4 when a high
//! resolution feature is wanted; the ordinary token grid is recovered by
//! subsampling. Intermediate encoder taps can be supervised either directly,
//! by MSE toward the final feature, or through a replay of the final layer's
//! sampling offsets and pixel affinity. Every auxiliary branch is removed by
//! [`Model::strip_for_inference`], leaving the inference graph unchanged.
//!
//! ```
//! use vpnext::{Model, ModelConfig, Phase, count_cost};
//!
//! let mut cfg = ModelConfig::default();
//! cfg.encoder.num_layers = 4;
//! cfg.encoder.tap_indices = vec![1, 2];
//! let model = Model::<f32>::new(cfg, 0).unwrap();
//! let stripped = model.strip_for_inference().unwrap();
//! assert!(stripped.params().num_scalars() < model.params().num_scalars());
//! let train = count_cost(&model, 64, Phase::Train).unwrap();
//! let infer = count_cost(&stripped, 64, Phase::Inference).unwrap();
//! assert!(train.flops > infer.flops);
//! ```

mod config;
pub mod cost;
pub mod deform;
mod error;
pub mod layers;
pub mod metrics;
mod model;
mod params;
pub mod seg;
pub mod vcr;
pub mod vit;
pub mod vitup;

pub use config::*;
pub use cost::{count_cost, CostReport};
pub use error::{ModelError, Result};
pub use metrics::{miou, ConfusionMatrix};
pub use model::{Model, ModelOutputs, Phase, TrainingLoss, AUX_PREFIX};
pub use params::{Bound, Init, ParamBuilder, ParamId, ParamStore};
pub use seg::{ClassMask, IGNORE_INDEX};
pub use vit::{EncoderOutputs, Image};
