//! File formats, dataset manifests, and the synthetic dataset generator.

pub mod manifest;
pub mod models;
pub mod netpbm;
pub mod synth;
pub mod weights;

pub use manifest::Manifest;
pub use netpbm::{read_pgm, read_ppm, resize_labels_nearest, resize_nearest, write_pgm, write_ppm};
pub use weights::{read_tensors, write_tensors};

use crate::labels::LabelMap;
use crate::tensor::Tensor;

/// An image (`[3,H,W]`, values in `[0,1]`) with its per-pixel class labels.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: LabelMap,
}
