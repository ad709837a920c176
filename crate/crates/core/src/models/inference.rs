use serde::{Deserialize, Serialize};

use stillframe_nn::Tensor;

use crate::imagecore::{to_grayscale, BinaryMask, Image};

use super::{images_to_tensor, masks_to_tensor, tensor_to_image, ColorMode, ModelBundle, ModelError};

/// Where the generator's mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Dataset masks; the segmentation branch is absent or ignored.
    #[default]
    GroundTruth,
    /// Segmentation network followed by the dynamic head.
    Segmentation,
}

/// Image in the channel layout a color mode works in.
pub fn to_color_mode(img: &Image, color: ColorMode) -> Image {
    match color {
        ColorMode::Gray => to_grayscale(img),
        ColorMode::Rgb => img.clone(),
    }
}

/// Masks predicted by the segmentation branch.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// Encoded soft mask `[N, 1, H, W]` in the generator's mask-channel scale.
    pub channel: Tensor<f32>,
    pub masks: Vec<BinaryMask>,
    pub labels: Vec<Vec<u8>>,
}

impl ModelBundle {
    /// Run segmentation and the dynamic head on RGB images.
    pub fn predict_masks(&self, images: &[&Image]) -> Result<MaskPrediction, ModelError> {
        let seg = self
            .segmentation
            .as_ref()
            .ok_or_else(|| ModelError::Config("bundle has no segmentation network; supply a mask".into()))?;
        if images.iter().any(|i| i.channels() != seg.config.in_channels) {
            return Err(ModelError::Shape(format!("segmentation expects {}-channel images", seg.config.in_channels)));
        }
        let head = self.head();
        let (logits, _) = seg.forward(&images_to_tensor(images))?;
        let (soft, _) = head.forward(&logits)?;
        let masks = (0..images.len()).map(|i| head.hard_mask(&soft, i)).collect();
        let labels = (0..images.len()).map(|i| super::argmax_labels(&logits, i)).collect();
        let (channel, _) = head.encode(&soft);
        Ok(MaskPrediction { channel, masks, labels })
    }

    /// Generator output for a batch. `mask_channel` is required when the
    /// generator is conditioned on a mask.
    pub fn generate(&self, images: &[&Image], mask_channel: Option<&Tensor<f32>>) -> Result<Vec<Image>, ModelError> {
        let color = self.config.generator.color;
        let prepared: Vec<Image> = images.iter().map(|i| to_color_mode(i, color)).collect();
        let refs: Vec<&Image> = prepared.iter().collect();
        let x = images_to_tensor::<f32>(&refs);
        let input = if self.config.generator.use_mask {
            let m = mask_channel.ok_or_else(|| ModelError::Config("generator needs a mask".into()))?;
            if m.shape() != [x.batch(), 1, x.height(), x.width()] {
                return Err(ModelError::Shape(format!("mask channel {:?} does not match images", m.shape())));
            }
            Tensor::cat_channels(&[&x, m])
        } else {
            x
        };
        let (out, _) = self.generator.forward(&input)?;
        Ok((0..images.len()).map(|i| tensor_to_image(&out, i)).collect())
    }

    /// Remove dynamic objects from a batch of RGB images. Without masks the
    /// segmentation branch supplies them.
    pub fn inpaint(&self, images: &[&Image], masks: Option<&[&BinaryMask]>) -> Result<Vec<Inpainting>, ModelError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (channel, used) = match masks {
            Some(m) => {
                if m.len() != images.len() {
                    return Err(ModelError::Shape(format!("{} masks for {} images", m.len(), images.len())));
                }
                if m.iter().zip(images).any(|(m, i)| !m.matches(i)) {
                    return Err(ModelError::Shape("mask size differs from image".into()));
                }
                (masks_to_tensor(m), m.iter().map(|&m| m.clone()).collect::<Vec<_>>())
            }
            None if self.segmentation.is_some() => {
                let p = self.predict_masks(images)?;
                (p.channel, p.masks)
            }
            None if !self.config.generator.use_mask => {
                let (h, w) = (images[0].height(), images[0].width());
                (Tensor::zeros([0, 0, 0, 0]), vec![BinaryMask::zeros(h, w); images.len()])
            }
            None => return Err(ModelError::Config("no mask given and no segmentation network".into())),
        };
        let outputs = self.generate(images, Some(&channel).filter(|_| self.config.generator.use_mask))?;
        Ok(outputs.into_iter().zip(used).map(|(output, mask)| Inpainting { output, mask }).collect())
    }
}

/// Generator output and the mask it was conditioned on.
#[derive(Debug, Clone)]
pub struct Inpainting {
    pub output: Image,
    pub mask: BinaryMask,
}
