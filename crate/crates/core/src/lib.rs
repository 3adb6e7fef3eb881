//! Two-stage GAN-inversion inpainting.
//!
//! An encoder maps an erased image and its mask into the extended style space of a frozen
//! generator. A gated mixer blends that code with randomly sampled codes, so one input
//! yields many completions. A second-stage skip network feeds multiplicative and additive
//! residuals into the generator's intermediate features to sharpen the result.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod editing;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod imageio;
pub mod masking;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod pretrain;
pub mod runlog;
pub mod skip;
pub mod stylegan;
pub mod svm;
pub mod training;

pub use config::{Ablation, DataSource, LossWeights, ModelConfig, PretrainConfig, Profile, Stage, TrainConfig};
pub use error::{Error, Result};
pub use masking::{BinaryMask, MaskBand};
