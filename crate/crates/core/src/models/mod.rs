//! Generator, patch discriminator, segmentation network and the fixed
//! dynamic-class head, plus checkpointing.
//!
//! Networks are generic over the float type: `f32` for training, `f64` for
//! finite-difference gradient checks. All tensors are NCHW.

mod checkpoint;
mod discriminator;
mod generator;
mod head;
mod inference;
mod segmentation;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use stillframe_nn::{Float, Tensor};

use crate::imagecore::{BinaryMask, Image};

pub use checkpoint::{config_hash, load_checkpoint, load_checkpoint_expecting, save_checkpoint, ModelBundle, OptimizerStates, Progress, CHECKPOINT_FORMAT};
pub use discriminator::{Discriminator, DiscriminatorCache, DiscriminatorConfig, PatchGeometry, PatchResponse};
pub use generator::{Generator, GeneratorCache, GeneratorConfig};
pub use head::{DynamicHead, DynamicHeadCache};
pub use inference::{to_color_mode, Inpainting, MaskPrediction, MaskSource};
pub use segmentation::{argmax_labels, SegmentationCache, SegmentationConfig, SegmentationNet};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {height}x{width} is not divisible by {required}")]
    Divisibility { height: usize, width: usize, required: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Image space the translation networks work in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    #[default]
    Gray,
    Rgb,
}

impl ColorMode {
    pub fn channels(self) -> usize {
        match self {
            ColorMode::Gray => 1,
            ColorMode::Rgb => 3,
        }
    }
}

/// Architecture of every network in a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub segmentation: Option<SegmentationConfig>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.generator.check_size(self.height, self.width)?;
        self.discriminator.output_size(self.height, self.width)?;
        if self.generator.color != self.discriminator.color {
            return Err(ModelError::Config("generator and discriminator color modes differ".into()));
        }
        if let Some(s) = &self.segmentation {
            s.check_size(self.height, self.width)?;
        }
        Ok(())
    }
}

/// Convert a batch of unit-range images into a signed network tensor.
pub fn images_to_tensor<T: Float>(images: &[&Image]) -> Tensor<T> {
    assert!(!images.is_empty(), "empty batch");
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        assert_eq!((img.channels(), img.height(), img.width()), (c, h, w), "batch images differ in shape");
        data.extend(img.data().iter().map(|&v| T::from_f64_lossy(2.0 * v as f64 - 1.0)));
    }
    Tensor::from_vec([images.len(), c, h, w], data)
}

/// Hard masks encoded as a `-1` (static) / `+1` (dynamic) channel.
pub fn masks_to_tensor<T: Float>(masks: &[&BinaryMask]) -> Tensor<T> {
    assert!(!masks.is_empty(), "empty batch");
    let (h, w) = (masks[0].height(), masks[0].width());
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend(m.data().iter().map(|&v| if v == 1 { T::one() } else { -T::one() }));
    }
    Tensor::from_vec([masks.len(), 1, h, w], data)
}

/// Sample `index` of a signed network tensor back to a unit-range image.
pub fn tensor_to_image<T: Float>(t: &Tensor<T>, index: usize) -> Image {
    let [_, c, h, w] = t.shape();
    let data = t
        .sample(index)
        .iter()
        .map(|v| ((v.to_f64_lossy() as f32 + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, c, crate::imagecore::ValueRange::Unit, data).expect("tensor sample forms a valid image")
}

pub(crate) fn init_std_for(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
