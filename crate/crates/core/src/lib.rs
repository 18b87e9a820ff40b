//! Conformer hybrid acoustic model with time down/up-sampling, trained on
//! frame-level targets with a small tape-based autodiff engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom fix the scalar for common use.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod conformer;
pub mod corpus;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod graph;
pub mod heads;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use augment::{spec_augment, SpecAugmentConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use conformer::BlockConfig;
pub use corpus::{make_batches, Batch, CorpusSpec, Utterance};
pub use error::{Error, Result};
pub use frontend::{output_frames, DownsampleLayer, FrontendConfig, FrontendVariant};
pub use graph::{Criterion, Gradients, Graph, Var};
pub use heads::{FrameStats, HeadConfig};
pub use model::{AcousticModel, ModelConfig, ModelInput};
pub use optim::{Nadam, Newbob, OptimConfig};
pub use params::{Census, ParamId, ParamSink, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::{EpochMetrics, TrainState, Trainer};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Trainer64 = Trainer<f64>;
pub type Trainer32 = Trainer<f32>;
