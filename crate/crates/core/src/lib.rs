//! Desk-scale multi-domain adaptation for semantic segmentation of
//! stylized images.
//!
//! The pipeline: style-transfer augmentation per style sub-domain,
//! supervised training of one segmentation network per sub-domain,
//! fine-grained adversarial domain confusion against the real target
//! images, and style-similarity-weighted fusion of the per-sub-domain
//! models at inference time. Everything runs on a small built-in tensor
//! engine with reverse-mode automatic differentiation.

pub mod confusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod io;
pub mod labels;
pub mod linalg;
pub mod nets;
pub mod rng;
pub mod seg_train;
pub mod style_space;
pub mod style_transfer;
pub mod tensor;

pub use error::{Error, Result};
pub use labels::{LabelMap, IGNORE};
pub use tensor::{clip_grad_norm, zero_grads, Graph, Sgd, Tensor};
