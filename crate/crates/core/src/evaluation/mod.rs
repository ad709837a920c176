//! Metrics, classical inpainting baselines, method comparison and the
//! place-recognition pilot.

mod compare;
mod descriptor;
mod inpaint;
mod pilot;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagecore::{BinaryMask, Image};
use crate::models::{to_color_mode, ColorMode, MaskSource, ModelBundle, ModelError};
use crate::scenegen::{DatasetError, GenerationError, SamplePair};

pub use compare::{compare_methods, shadow_pixels, shadow_mae, write_comparison, write_image_grid, CompareOptions, Comparison, MethodOutcome, ModelSlot};
pub use descriptor::{GlobalDescriptor, DESCRIPTOR_LEN};
pub use inpaint::{inpaint_diffusion, inpaint_fmm, DEFAULT_DIFFUSION_ITERS, DEFAULT_FMM_RADIUS};
pub use pilot::{pilot_scenes, pilot_with_model, place_recognition_pilot, DistanceShift, PilotReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("hole covers the whole image; nothing to propagate from")]
    NoKnownPixels,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot write image {path}: {source}")]
    Png { path: String, source: image::ImageError },
}

/// Per-image errors in percent of the intensity range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub l1: f64,
    /// Absent when the mask is empty.
    pub l1_mask: Option<f64>,
    /// Absent when the mask covers the image.
    pub l1_no_mask: Option<f64>,
    pub masked_pixels: usize,
    pub pixels: usize,
}

/// L1 over the whole image, inside the mask and outside it. Each pixel's
/// error is the mean absolute difference over channels.
pub fn compute_metrics(prediction: &Image, target: &Image, mask: &BinaryMask) -> Result<ImageMetrics, EvalError> {
    if !prediction.same_size(target) || prediction.channels() != target.channels() || !mask.matches(target) {
        return Err(EvalError::Shape(format!(
            "prediction {}x{}x{}, target {}x{}x{}, mask {}x{}",
            prediction.height(),
            prediction.width(),
            prediction.channels(),
            target.height(),
            target.width(),
            target.channels(),
            mask.height(),
            mask.width()
        )));
    }
    let p = target.height() * target.width();
    let c = target.channels();
    let (mut inside, mut outside) = (0.0f64, 0.0f64);
    for i in 0..p {
        let mut e = 0.0;
        for ch in 0..c {
            e += (prediction.plane(ch)[i] as f64 - target.plane(ch)[i] as f64).abs();
        }
        e /= c as f64;
        if mask.data()[i] == 1 {
            inside += e;
        } else {
            outside += e;
        }
    }
    let m = mask.count();
    Ok(ImageMetrics {
        id: String::new(),
        l1: 100.0 * (inside + outside) / p as f64,
        l1_mask: (m > 0).then(|| 100.0 * inside / m as f64),
        l1_no_mask: (m < p).then(|| 100.0 * outside / (p - m) as f64),
        masked_pixels: m,
        pixels: p,
    })
}

/// Per-image metrics and their means for one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset_hash: String,
    pub samples: usize,
    pub l1: f64,
    pub l1_mask: Option<f64>,
    pub l1_no_mask: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    /// Aggregate values are the means of the per-image values that exist.
    pub fn aggregate(method: &str, dataset_hash: &str, per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len();
        let l1 = if n == 0 { 0.0 } else { per_image.iter().map(|m| m.l1).sum::<f64>() / n as f64 };
        Self {
            method: method.to_string(),
            dataset_hash: dataset_hash.to_string(),
            samples: n,
            l1,
            l1_mask: mean_present(per_image.iter().map(|m| m.l1_mask)),
            l1_no_mask: mean_present(per_image.iter().map(|m| m.l1_no_mask)),
            per_image,
        }
    }
}

/// Hex SHA-256 over sample ids and pixel data, in order.
pub fn dataset_hash(pairs: &[SamplePair]) -> String {
    let mut h = Sha256::new();
    for p in pairs {
        h.update(p.id.as_bytes());
        h.update([0]);
        h.update(p.dynamic_img.to_u8_interleaved());
        h.update(p.static_img.to_u8_interleaved());
        h.update(p.mask.data());
    }
    hex::encode(h.finalize())
}

/// Model outputs for every pair, in order. Ground-truth masks are passed
/// unless `source` asks for the segmentation branch.
pub fn model_outputs(
    bundle: &ModelBundle,
    pairs: &[SamplePair],
    source: MaskSource,
    batch_size: usize,
) -> Result<Vec<Image>, EvalError> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let images: Vec<&Image> = chunk.iter().map(|p| &p.dynamic_img).collect();
        let masks: Vec<&BinaryMask> = chunk.iter().map(|p| &p.mask).collect();
        let given = (source == MaskSource::GroundTruth).then_some(masks.as_slice());
        out.extend(bundle.inpaint(&images, given)?.into_iter().map(|r| r.output));
    }
    Ok(out)
}

/// Metrics of precomputed outputs against the static targets, in `color`.
pub fn score_outputs(
    method: &str,
    pairs: &[SamplePair],
    outputs: &[Image],
    color: ColorMode,
) -> Result<MetricsReport, EvalError> {
    if outputs.len() != pairs.len() {
        return Err(EvalError::Shape(format!("{} outputs for {} samples", outputs.len(), pairs.len())));
    }
    let per_image = pairs
        .iter()
        .zip(outputs)
        .map(|(p, o)| {
            let target = to_color_mode(&p.static_img, color);
            let mut m = compute_metrics(o, &target, &p.mask)?;
            m.id = p.id.clone();
            Ok(m)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(MetricsReport::aggregate(method, &dataset_hash(pairs), per_image))
}

/// Evaluate a bundle in its own color mode.
pub fn evaluate_model(
    bundle: &ModelBundle,
    pairs: &[SamplePair],
    source: MaskSource,
    batch_size: usize,
) -> Result<MetricsReport, EvalError> {
    let outputs = model_outputs(bundle, pairs, source, batch_size)?;
    score_outputs("model", pairs, &outputs, bundle.config.generator.color)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ValueRange;
    use proptest::prelude::*;

    #[test]
    fn identical_images_score_zero() {
        let a = Image::filled(8, 8, 3, ValueRange::Unit, 0.3);
        let m = compute_metrics(&a, &a, &BinaryMask::zeros(8, 8)).unwrap();
        assert_eq!((m.l1, m.l1_mask, m.l1_no_mask), (0.0, None, Some(0.0)));
    }

    #[test]
    fn offset_inside_mask_only() {
        let target = Image::filled(8, 8, 1, ValueRange::Unit, 0.2);
        let mut data = target.data().to_vec();
        let mut mask = vec![0u8; 64];
        for y in 2..5 {
            for x in 1..7 {
                data[y * 8 + x] = 0.7;
                mask[y * 8 + x] = 1;
            }
        }
        let pred = Image::new(8, 8, 1, ValueRange::Unit, data).unwrap();
        let m = compute_metrics(&pred, &target, &BinaryMask::new(8, 8, mask).unwrap()).unwrap();
        assert!((m.l1_mask.unwrap() - 50.0).abs() < 1e-5);
        assert_eq!(m.l1_no_mask, Some(0.0));
    }

    #[test]
    fn aggregate_is_mean_of_present_values() {
        let mk = |l1, mask| ImageMetrics { id: String::new(), l1, l1_mask: mask, l1_no_mask: Some(l1), masked_pixels: 0, pixels: 1 };
        let r = MetricsReport::aggregate("m", "h", vec![mk(1.0, Some(4.0)), mk(3.0, None)]);
        assert_eq!(r.l1, 2.0);
        assert_eq!(r.l1_mask, Some(4.0));
    }

    proptest! {
        #[test]
        fn decomposition_identity(
            pred in proptest::collection::vec(0.0f32..=1.0, 48),
            target in proptest::collection::vec(0.0f32..=1.0, 48),
            mask in proptest::collection::vec(0u8..=1, 16),
        ) {
            let p = Image::new(4, 4, 3, ValueRange::Unit, pred).unwrap();
            let t = Image::new(4, 4, 3, ValueRange::Unit, target).unwrap();
            let m = BinaryMask::new(4, 4, mask).unwrap();
            let r = compute_metrics(&p, &t, &m).unwrap();
            let k = m.count() as f64;
            let recombined = (k * r.l1_mask.unwrap_or(0.0) + (16.0 - k) * r.l1_no_mask.unwrap_or(0.0)) / 16.0;
            prop_assert!((recombined - r.l1).abs() <= 1e-12 * r.l1.max(1.0));
            prop_assert!((0.0..=100.0).contains(&r.l1));
        }
    }
}
