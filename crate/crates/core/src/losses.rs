//! Adversarial, L1 and class-weighted cross-entropy objectives.
//!
//! Patch losses are computed from discriminator logits with the stable
//! softplus form of binary cross-entropy; the probability-space entry points
//! clamp scores to `[EPS, 1 - EPS]`. Mask emphasis multiplies each patch's
//! cross-entropy term before averaging over all patches of the batch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use stillframe_nn::activation::sigmoid_scalar;
use stillframe_nn::{Float, Tensor};

use crate::imagecore::{BinaryMask, Image};
use crate::models::PatchGeometry;

/// Probability clamp for the probability-space losses.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the L1 reconstruction term in the generator objective.
    pub lambda1: f64,
    /// Weight of cross-entropy in the segmentation objective.
    pub lambda2: f64,
    /// Emphasis of masked patches in the adversarial loss.
    pub gamma: f64,
    /// Per-class cross-entropy weights; empty means all ones.
    pub class_weights: Vec<f32>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 100.0, lambda2: 1.0, gamma: 2.0, class_weights: Vec::new() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(LossError::Weights(format!("lambda1 = {} must be >= 0", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(LossError::Weights(format!("lambda2 = {} must be >= 0", self.lambda2)));
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return Err(LossError::Weights(format!("gamma = {} must be >= 1", self.gamma)));
        }
        if let Some(w) = self.class_weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(LossError::Weights(format!("class weight {w} must be positive")));
        }
        Ok(())
    }
}

/// Per-patch weights `1 + coverage * (gamma - 1)` on the discriminator grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchWeightMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PatchWeightMap {
    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Fractional mask coverage of every patch's receptive field, mapped to a weight.
pub fn patch_weight_map(mask: &BinaryMask, geometry: &PatchGeometry, gamma: f64) -> Result<PatchWeightMap, LossError> {
    let (h, w) = (mask.height(), mask.width());
    if geometry.input != (h, w) {
        return Err(LossError::Shape(format!(
            "patch geometry covers {:?}, mask is {h}x{w}",
            geometry.input
        )));
    }
    // summed-area table with a zero border
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask.data()[y * w + x] as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let (gh, gw) = geometry.output;
    let mut data = Vec::with_capacity(gh * gw);
    for r in 0..gh {
        for c in 0..gw {
            let (y0, y1, x0, x1) = geometry.cell_rect(r, c);
            let at = |y: usize, x: usize| sat[y * (w + 1) + x] as i64;
            let count = at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0);
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let coverage = count as f64 / area;
            data.push(1.0 + coverage * (gamma - 1.0));
        }
    }
    Ok(PatchWeightMap { height: gh, width: gw, data })
}

/// Stack per-sample weight maps into a `[N, 1, h, w]` tensor.
pub fn weight_tensor<T: Float>(maps: &[PatchWeightMap]) -> Tensor<T> {
    let (h, w) = (maps[0].height, maps[0].width);
    let data = maps.iter().flat_map(|m| m.data.iter().map(|&v| T::from_f64_lossy(v))).collect();
    Tensor::from_vec([maps.len(), 1, h, w], data)
}

/// Discriminator and generator adversarial losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLoss {
    pub discriminator: f64,
    pub generator: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn adversarial_from_scores<T: Float>(
    real: &Tensor<T>,
    fake: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> Result<AdversarialLoss, LossError> {
    if real.shape() != fake.shape() {
        return Err(LossError::Shape(format!("real {:?} vs fake {:?}", real.shape(), fake.shape())));
    }
    if let Some(w) = weights {
        if w.shape() != real.shape() {
            return Err(LossError::Shape(format!("weights {:?} vs scores {:?}", w.shape(), real.shape())));
        }
    }
    let n = real.len() as f64;
    let (mut real_term, mut fake_term, mut gen_term) = (0.0, 0.0, 0.0);
    for i in 0..real.len() {
        let wt = weights.map_or(1.0, |w| w.data()[i].to_f64_lossy());
        let pr = clamp_prob(real.data()[i].to_f64_lossy());
        let pf = clamp_prob(fake.data()[i].to_f64_lossy());
        real_term += wt * -pr.ln();
        fake_term += wt * -(1.0 - pf).ln();
        gen_term += wt * -pf.ln();
    }
    Ok(AdversarialLoss { discriminator: real_term / n + fake_term / n, generator: gen_term / n })
}

/// Conditional adversarial loss from patch scores in (0, 1).
pub fn cgan_loss<T: Float>(real_scores: &Tensor<T>, fake_scores: &Tensor<T>) -> Result<AdversarialLoss, LossError> {
    adversarial_from_scores(real_scores, fake_scores, None)
}

/// Mask-emphasized adversarial loss: each patch term is scaled by its weight.
pub fn mgan_loss<T: Float>(
    real_scores: &Tensor<T>,
    fake_scores: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<AdversarialLoss, LossError> {
    adversarial_from_scores(real_scores, fake_scores, Some(weights))
}

/// `-log sigmoid(z)`, stable for any `z`.
fn softplus_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Discriminator loss from logits with gradients for both logit grids.
/// `weights` of `None` means unit weight everywhere.
pub fn discriminator_loss_logits<T: Float>(
    real_logits: &Tensor<T>,
    fake_logits: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> (f64, Tensor<T>, Tensor<T>) {
    assert_eq!(real_logits.shape(), fake_logits.shape(), "logit grids differ");
    let n = real_logits.len() as f64;
    let mut g_real = Tensor::zeros(real_logits.shape());
    let mut g_fake = Tensor::zeros(fake_logits.shape());
    let (mut lr, mut lf) = (0.0, 0.0);
    for i in 0..real_logits.len() {
        let wt = weights.map_or(1.0, |w| w.data()[i].to_f64_lossy());
        let zr = real_logits.data()[i].to_f64_lossy();
        let zf = fake_logits.data()[i].to_f64_lossy();
        lr += wt * softplus_neg(zr);
        lf += wt * softplus_neg(-zf);
        g_real.data_mut()[i] = T::from_f64_lossy(wt * (sigmoid_scalar(zr) - 1.0) / n);
        g_fake.data_mut()[i] = T::from_f64_lossy(wt * sigmoid_scalar(zf) / n);
    }
    (lr / n + lf / n, g_real, g_fake)
}

/// Non-saturating generator term `-log D(fake)` from logits, with gradient.
pub fn generator_adversarial_logits<T: Float>(fake_logits: &Tensor<T>, weights: Option<&Tensor<T>>) -> (f64, Tensor<T>) {
    let n = fake_logits.len() as f64;
    let mut g = Tensor::zeros(fake_logits.shape());
    let mut loss = 0.0;
    for i in 0..fake_logits.len() {
        let wt = weights.map_or(1.0, |w| w.data()[i].to_f64_lossy());
        let z = fake_logits.data()[i].to_f64_lossy();
        loss += wt * softplus_neg(z);
        g.data_mut()[i] = T::from_f64_lossy(wt * (sigmoid_scalar(z) - 1.0) / n);
    }
    (loss / n, g)
}

/// Mean absolute difference, optionally restricted to a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Value {
    pub value: f64,
    /// The region had no pixels; `value` is 0.
    pub empty_region: bool,
}

pub fn l1_loss(prediction: &Image, target: &Image, region: Option<&BinaryMask>) -> Result<L1Value, LossError> {
    if !prediction.same_size(target) || prediction.channels() != target.channels() {
        return Err(LossError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            prediction.height(),
            prediction.width(),
            prediction.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    if let Some(m) = region {
        if !m.matches(prediction) {
            return Err(LossError::Shape("region mask does not match image".into()));
        }
    }
    let p = prediction.height() * prediction.width();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for c in 0..prediction.channels() {
        let (a, b) = (prediction.plane(c), target.plane(c));
        for i in 0..p {
            if region.is_none_or(|m| m.data()[i] == 1) {
                sum += (a[i] as f64 - b[i] as f64).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok(L1Value { value: 0.0, empty_region: true });
    }
    Ok(L1Value { value: sum / count as f64, empty_region: false })
}

/// Mean absolute difference of two tensors and its gradient w.r.t. `prediction`.
/// `sample_weights` scales each sample's contribution (the mean is still over
/// all elements).
pub fn l1_loss_tensor<T: Float>(
    prediction: &Tensor<T>,
    target: &Tensor<T>,
    sample_weights: Option<&[f64]>,
) -> (f64, Tensor<T>) {
    assert_eq!(prediction.shape(), target.shape(), "l1 shapes differ");
    let n = prediction.len() as f64;
    let per = prediction.len() / prediction.batch().max(1);
    let mut g = Tensor::zeros(prediction.shape());
    let mut sum = 0.0;
    for i in 0..prediction.len() {
        let sw = sample_weights.map_or(1.0, |w| w[i / per]);
        let d = prediction.data()[i].to_f64_lossy() - target.data()[i].to_f64_lossy();
        sum += sw * d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        g.data_mut()[i] = T::from_f64_lossy(sw * s / n);
    }
    (sum / n, g)
}

/// Class-weighted cross-entropy averaged over all pixels, with the gradient
/// w.r.t. the logits. `targets` holds one label plane per sample.
pub fn segmentation_loss<T: Float>(
    logits: &Tensor<T>,
    targets: &[&[u8]],
    class_weights: &[f32],
) -> Result<(f64, Tensor<T>), LossError> {
    let [n, c, h, w] = logits.shape();
    let p = h * w;
    if targets.len() != n || targets.iter().any(|t| t.len() != p) {
        return Err(LossError::Shape(format!("targets do not match logits {:?}", logits.shape())));
    }
    if !class_weights.is_empty() && class_weights.len() != c {
        return Err(LossError::Shape(format!("{} class weights for {c} classes", class_weights.len())));
    }
    let total = (n * p) as f64;
    let mut g = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let mut z = vec![0.0f64; c];
    for b in 0..n {
        let src = logits.sample(b);
        for i in 0..p {
            let label = targets[b][i] as usize;
            if label >= c {
                return Err(LossError::Shape(format!("label {label} outside {c} classes")));
            }
            let wt = if class_weights.is_empty() { 1.0 } else { class_weights[label] as f64 };
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                z[ch] = src[ch * p + i].to_f64_lossy();
                max = max.max(z[ch]);
            }
            let sum_exp: f64 = z.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += wt * (lse - z[label]);
            let dst = g.sample_mut(b);
            for ch in 0..c {
                let prob = (z[ch] - lse).exp();
                let onehot = if ch == label { 1.0 } else { 0.0 };
                dst[ch * p + i] = T::from_f64_lossy(wt * (prob - onehot) / total);
            }
        }
    }
    Ok((loss / total, g))
}

/// Generator total: adversarial term plus weighted L1.
pub fn generator_objective(adversarial: f64, l1: f64, weights: &LossWeights) -> f64 {
    adversarial + weights.lambda1 * l1
}

/// Segmentation total: adversarial term through the mask plus weighted CE.
pub fn segmentation_objective(adversarial: f64, cross_entropy: f64, weights: &LossWeights) -> f64 {
    adversarial + weights.lambda2 * cross_entropy
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ValueRange;
    use crate::models::DiscriminatorConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(values: Vec<f64>) -> Tensor<f64> {
        let n = values.len();
        Tensor::from_vec([1, 1, 1, n], values)
    }

    fn random_scores(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([2, 1, 3, n], (0..2 * 3 * n).map(|_| rng.random_range(0.001..0.999)).collect())
    }

    #[test]
    fn half_scores_give_two_ln_two() {
        let l = cgan_loss(&grid(vec![0.5; 9]), &grid(vec![0.5; 9])).unwrap();
        assert!((l.discriminator - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.discriminator - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_has_zero_loss() {
        let l = cgan_loss(&grid(vec![1.0; 4]), &grid(vec![0.0; 4])).unwrap();
        assert!(l.discriminator < 1e-6);
        assert!(l.generator.is_finite());
    }

    #[test]
    fn cgan_matches_elementwise_oracle() {
        let (r, f) = (random_scores(5, 1), random_scores(5, 2));
        let l = cgan_loss(&r, &f).unwrap();
        let n = r.len() as f64;
        let oracle_d: f64 = r.data().iter().zip(f.data()).map(|(a, b)| -a.ln() - (1.0 - b).ln()).sum::<f64>() / n;
        let oracle_g: f64 = f.data().iter().map(|b| -b.ln()).sum::<f64>() / n;
        assert!((l.discriminator - oracle_d).abs() < 1e-6);
        assert!((l.generator - oracle_g).abs() < 1e-6);
    }

    #[test]
    fn single_emphasized_patch_counts_double() {
        let mut w = vec![1.0; 9];
        w[4] = 2.0;
        let l = mgan_loss(&grid(vec![0.5; 9]), &grid(vec![0.5; 9]), &grid(w)).unwrap();
        let per_patch = 2f64.ln();
        assert!((l.discriminator - (10.0 * 2.0 * per_patch) / 9.0).abs() < 1e-12);
        assert!((l.generator - 10.0 * per_patch / 9.0).abs() < 1e-12);
    }

    #[test]
    fn generator_gradient_scales_with_gamma_on_masked_patches() {
        let logits = grid(vec![0.3, 0.3]);
        let weights = grid(vec![1.0, 2.0]);
        let (_, g) = generator_adversarial_logits(&logits, Some(&weights));
        assert!((g.data()[1] / g.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn logit_losses_agree_with_probability_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zr = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>());
        let zf = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|_| rng.random_range(-4.0..4.0)).collect::<Vec<f64>>());
        let w = Tensor::from_vec([1, 1, 4, 4], (0..16).map(|_| rng.random_range(1.0..2.0)).collect::<Vec<f64>>());
        let sig = |t: &Tensor<f64>| t.map(sigmoid_scalar);
        let p = mgan_loss(&sig(&zr), &sig(&zf), &w).unwrap();
        let (d, gr, gf) = discriminator_loss_logits(&zr, &zf, Some(&w));
        let (g, gg) = generator_adversarial_logits(&zf, Some(&w));
        assert!((p.discriminator - d).abs() < 1e-9);
        assert!((p.generator - g).abs() < 1e-9);
        // finite-difference check of the logit gradients
        for i in [0, 5, 15] {
            let bump = |t: &Tensor<f64>, delta: f64| {
                let mut t = t.clone();
                t.data_mut()[i] += delta;
                t
            };
            let num_r = (discriminator_loss_logits(&bump(&zr, 1e-6), &zf, Some(&w)).0
                - discriminator_loss_logits(&bump(&zr, -1e-6), &zf, Some(&w)).0)
                / 2e-6;
            let num_f = (discriminator_loss_logits(&zr, &bump(&zf, 1e-6), Some(&w)).0
                - discriminator_loss_logits(&zr, &bump(&zf, -1e-6), Some(&w)).0)
                / 2e-6;
            let num_g = (generator_adversarial_logits(&bump(&zf, 1e-6), Some(&w)).0
                - generator_adversarial_logits(&bump(&zf, -1e-6), Some(&w)).0)
                / 2e-6;
            assert!((num_r - gr.data()[i]).abs() < 1e-8);
            assert!((num_f - gf.data()[i]).abs() < 1e-8);
            assert!((num_g - gg.data()[i]).abs() < 1e-8);
        }
    }

    fn brute_force_weights(mask: &BinaryMask, geo: &PatchGeometry, gamma: f64) -> Vec<f64> {
        let mut out = Vec::new();
        for r in 0..geo.output.0 {
            for c in 0..geo.output.1 {
                let (y0, y1, x0, x1) = geo.cell_rect(r, c);
                let mut hits = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        hits += mask.get(y, x) as usize;
                    }
                }
                out.push(1.0 + hits as f64 / ((y1 - y0) * (x1 - x0)) as f64 * (gamma - 1.0));
            }
        }
        out
    }

    #[test]
    fn weight_map_examples() {
        let geo = DiscriminatorConfig::default().patch_geometry(64, 64).unwrap();
        let empty = patch_weight_map(&BinaryMask::zeros(64, 64), &geo, 2.0).unwrap();
        assert!(empty.data.iter().all(|&w| w == 1.0));
        let full = patch_weight_map(&BinaryMask::ones(64, 64), &geo, 2.0).unwrap();
        assert!(full.data.iter().all(|&w| w == 2.0));
        // an interior cell at 256x256 spans 70 columns; cover its left half
        let geo256 = DiscriminatorConfig::default().patch_geometry(256, 256).unwrap();
        let (_, _, x0, x1) = geo256.cell_rect(10, 10);
        assert_eq!(x1 - x0, 70);
        let mid = x0 + 35;
        let data = (0..256 * 256).map(|i| ((i % 256) < mid) as u8).collect();
        let half = BinaryMask::new(256, 256, data).unwrap();
        let map = patch_weight_map(&half, &geo256, 2.0).unwrap();
        assert_eq!(map.get(10, 10), 1.5);
        assert_eq!(map.data, brute_force_weights(&half, &geo256, 2.0));
        assert!(patch_weight_map(&BinaryMask::zeros(32, 32), &geo, 2.0).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = Image::filled(4, 4, 1, ValueRange::Unit, 0.3);
        let b = Image::filled(4, 4, 1, ValueRange::Unit, 0.4);
        assert_eq!(l1_loss(&a, &a, None).unwrap().value, 0.0);
        assert!((l1_loss(&b, &a, None).unwrap().value - 0.1).abs() < 1e-7);
        let empty = l1_loss(&a, &b, Some(&BinaryMask::zeros(4, 4))).unwrap();
        assert!(empty.empty_region && empty.value == 0.0);
    }

    #[test]
    fn segmentation_loss_examples() {
        let zeros = Tensor::<f64>::zeros([1, 6, 2, 2]);
        let labels = [0u8, 1, 4, 5];
        let (l, _) = segmentation_loss(&zeros, &[&labels], &[]).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert!((l - 1.7918).abs() < 1e-4);
        let mut confident = Tensor::<f64>::zeros([1, 6, 2, 2]);
        for (i, &lab) in labels.iter().enumerate() {
            confident.data_mut()[lab as usize * 4 + i] = 1e3;
        }
        assert!(segmentation_loss(&confident, &[&labels], &[]).unwrap().0 < 1e-12);
    }

    #[test]
    fn segmentation_loss_matches_naive_oracle_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::from_vec([2, 4, 2, 3], (0..48).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>());
        let labels: Vec<Vec<u8>> = (0..2).map(|_| (0..6).map(|_| rng.random_range(0..4)).collect()).collect();
        let refs: Vec<&[u8]> = labels.iter().map(|v| v.as_slice()).collect();
        let weights = [0.5f32, 2.0, 1.5, 3.0];
        let (l, g) = segmentation_loss(&logits, &refs, &weights).unwrap();
        let mut oracle = 0.0;
        for b in 0..2 {
            for i in 0..6 {
                let zs: Vec<f64> = (0..4).map(|c| logits.at(b, c, i / 3, i % 3)).collect();
                let lab = labels[b][i] as usize;
                let lse = zs.iter().map(|z| z.exp()).sum::<f64>().ln();
                oracle += weights[lab] as f64 * (lse - zs[lab]);
            }
        }
        assert!((l - oracle / 12.0).abs() < 1e-6);
        for i in [0, 7, 30, 47] {
            let f = |d: f64| {
                let mut t = logits.clone();
                t.data_mut()[i] += d;
                segmentation_loss(&t, &refs, &weights).unwrap().0
            };
            assert!(((f(1e-6) - f(-1e-6)) / 2e-6 - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn objectives_compose() {
        let w = LossWeights::default();
        assert!((generator_objective(0.7, 0.05, &w) - (0.7 + 100.0 * 0.05)).abs() < 1e-12);
        let pure = LossWeights { lambda1: 0.0, ..LossWeights::default() };
        assert_eq!(generator_objective(0.7, 0.05, &pure), 0.7);
        assert!((segmentation_objective(0.7, 1.2, &w) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { gamma: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { class_weights: vec![1.0, 0.0], ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn unit_weights_reduce_mgan_to_cgan(seed in any::<u64>(), n in 1usize..8) {
            let (r, f) = (random_scores(n, seed), random_scores(n, seed.wrapping_add(1)));
            let ones = Tensor::full(r.shape(), 1.0);
            prop_assert_eq!(cgan_loss(&r, &f).unwrap(), mgan_loss(&r, &f, &ones).unwrap());
            let (d1, gr1, gf1) = discriminator_loss_logits(&r, &f, None);
            let (d2, gr2, gf2) = discriminator_loss_logits(&r, &f, Some(&ones));
            prop_assert_eq!(d1, d2);
            prop_assert_eq!(gr1, gr2);
            prop_assert_eq!(gf1, gf2);
        }

        #[test]
        fn gamma_one_weight_map_is_all_ones(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = BinaryMask::new(64, 64, (0..4096).map(|_| rng.random_range(0..2)).collect()).unwrap();
            let geo = DiscriminatorConfig::default().patch_geometry(64, 64).unwrap();
            let map = patch_weight_map(&mask, &geo, 1.0).unwrap();
            prop_assert!(map.data.iter().all(|&w| w == 1.0));
        }

        #[test]
        fn weights_bounded_and_monotone(seed in any::<u64>(), gamma in 1.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let geo = DiscriminatorConfig::default().patch_geometry(64, 64).unwrap();
            let data: Vec<u8> = (0..4096).map(|_| (rng.random::<f64>() < 0.3) as u8).collect();
            let mut more = data.clone();
            for v in more.iter_mut() {
                if rng.random::<f64>() < 0.2 { *v = 1; }
            }
            let a = patch_weight_map(&BinaryMask::new(64, 64, data).unwrap(), &geo, gamma).unwrap();
            let b = patch_weight_map(&BinaryMask::new(64, 64, more).unwrap(), &geo, gamma).unwrap();
            for (x, y) in a.data.iter().zip(&b.data) {
                prop_assert!(*x >= 1.0 && *x <= gamma + 1e-12);
                prop_assert!(y >= x);
            }
        }

        #[test]
        fn losses_finite_at_boundaries(p in prop_oneof![Just(0.0f64), Just(1.0), 0.0f64..1.0]) {
            let l = cgan_loss(&grid(vec![p; 3]), &grid(vec![p; 3])).unwrap();
            prop_assert!(l.discriminator.is_finite() && l.generator.is_finite());
        }

        #[test]
        fn l1_zero_on_self_and_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut img = || Image::new(5, 6, 1, ValueRange::Unit, (0..30).map(|_| rng.random::<f32>()).collect()).unwrap();
            let (a, b) = (img(), img());
            let mask = BinaryMask::new(5, 6, (0..30).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
            prop_assert_eq!(l1_loss(&a, &a, Some(&mask)).unwrap().value, 0.0);
            prop_assert_eq!(l1_loss(&a, &b, Some(&mask)).unwrap(), l1_loss(&b, &a, Some(&mask)).unwrap());
            let oracle = (0..30).filter(|i| i % 3 == 0).map(|i| (a.data()[i] as f64 - b.data()[i] as f64).abs()).sum::<f64>() / 10.0;
            prop_assert!((l1_loss(&a, &b, Some(&mask)).unwrap().value - oracle).abs() < 1e-7);
        }

        #[test]
        fn cross_entropy_is_homogeneous_in_weights(seed in any::<u64>(), k in 0.1f32..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_vec([1, 3, 2, 2], (0..12).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>());
            let labels: Vec<u8> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let w = [0.7f32, 1.3, 2.1];
            let wk: Vec<f32> = w.iter().map(|v| v * k).collect();
            let a = segmentation_loss(&logits, &[&labels], &w).unwrap().0;
            let b = segmentation_loss(&logits, &[&labels], &wk).unwrap().0;
            prop_assert!((b - k as f64 * a).abs() < 1e-6 * b.abs().max(1.0));
        }
    }
}
