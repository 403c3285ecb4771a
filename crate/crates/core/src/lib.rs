//! Pyramid vision transformer v2 backbones built on a small reverse-mode
//! differentiable tensor library, with an exact analytic cost model.

pub mod analytics;
pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod config;
mod error;
pub mod gradcheck;
pub mod io;
pub mod macs;
pub mod nn;
pub mod oracle;
pub mod tensor;

pub use autograd::{finite_diff_grad, GradTape, Gradients};
pub use backbone::{FeaturePyramid, PvtModel};
pub use config::{config_for, config_for_name, Ablation, AttentionKind, ModelConfig, StageConfig, Variant};
pub use error::{Error, Result};
pub use tensor::{DType, Init, Scalar, Tensor};
