//! Multimodal meme sentiment classification: text and image feature
//! extractors, per-member fusion heads and a soft-voting ensemble.

pub mod bundle;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod image_channel;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod text_channel;
pub mod trainer;

pub use config::Config;
pub use error::{Error, ErrorKind, Result};
pub use fusion::{predict_label, soft_vote, Ensemble, Member, MemberSpec, ModelDims, Prediction, Sample};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use rng::Rng;
pub use tensor::Tensor;
