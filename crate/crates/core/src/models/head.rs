use stillframe_nn::activation::{softmax_channels, softmax_channels_backward};
use stillframe_nn::{Float, Tensor};

use crate::imagecore::{BinaryMask, ClassTable};

use super::ModelError;

/// Fixed 1x1 projection of class probabilities onto a signed dynamic score,
/// followed by tanh. Weights are plain fields, never optimizer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicHead {
    weights: Vec<f64>,
    pub dynamic_weight: f64,
    pub static_weight: f64,
    /// Hard-mask threshold on the soft mask.
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct DynamicHeadCache<T> {
    probs: Tensor<T>,
    soft: Tensor<T>,
}

impl DynamicHead {
    pub fn new(classes: &ClassTable) -> Result<Self, ModelError> {
        classes.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self::from_flags(&classes.dynamic_flags()))
    }

    /// Build from per-class dynamic flags. Needs at least one class of each kind.
    pub fn from_flags(dynamic: &[bool]) -> Self {
        let n = dynamic.len() as f64;
        let n_dyn = dynamic.iter().filter(|&&d| d).count() as f64;
        assert!(n_dyn > 0.0 && n_dyn < n, "need both dynamic and static classes");
        let dynamic_weight = (n - n_dyn) / n;
        let static_weight = -n_dyn / n;
        let weights = dynamic.iter().map(|&d| if d { dynamic_weight } else { static_weight }).collect();
        Self { weights, dynamic_weight, static_weight, threshold: 0.0 }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }

    /// Soft mask `[N, 1, H, W]` in (-1, 1).
    pub fn forward<T: Float>(&self, logits: &Tensor<T>) -> Result<(Tensor<T>, DynamicHeadCache<T>), ModelError> {
        let [n, c, h, w] = logits.shape();
        if c != self.classes() {
            return Err(ModelError::Shape(format!("head expects {} classes, got {c}", self.classes())));
        }
        let probs = softmax_channels(logits);
        let p = h * w;
        let weights: Vec<T> = self.weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let mut soft = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            let src = probs.sample(b);
            let dst = soft.sample_mut(b);
            for (i, d) in dst.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (ch, &wt) in weights.iter().enumerate() {
                    acc += wt * src[ch * p + i];
                }
                *d = acc.tanh();
            }
        }
        Ok((soft.clone(), DynamicHeadCache { probs, soft }))
    }

    pub fn backward<T: Float>(&self, cache: &DynamicHeadCache<T>, grad_soft: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = cache.probs.shape();
        let p = h * w;
        let weights: Vec<T> = self.weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
        let mut g_probs = Tensor::zeros([n, c, h, w]);
        for b in 0..n {
            let s = cache.soft.sample(b);
            let gs = grad_soft.sample(b);
            let dst = g_probs.sample_mut(b);
            for i in 0..p {
                let g_pre = gs[i] * (T::one() - s[i] * s[i]);
                for (ch, &wt) in weights.iter().enumerate() {
                    dst[ch * p + i] = g_pre * wt;
                }
            }
        }
        softmax_channels_backward(&cache.probs, &g_probs)
    }

    /// Hard mask of sample `index`: soft value strictly above the threshold.
    pub fn hard_mask<T: Float>(&self, soft: &Tensor<T>, index: usize) -> BinaryMask {
        let [_, _, h, w] = soft.shape();
        let t = self.threshold;
        let data = soft.sample(index).iter().map(|v| (v.to_f64_lossy() > t) as u8).collect();
        BinaryMask::new(h, w, data).expect("binary by construction")
    }

    /// Soft-mask values of a pixel that is certainly dynamic / certainly static.
    pub fn saturation_levels(&self) -> (f64, f64) {
        (self.dynamic_weight.tanh(), self.static_weight.tanh())
    }

    /// Affine map of soft-mask values onto the `[-1, 1]` mask-channel
    /// encoding, sending the saturation levels to `+1` and `-1`. Returns the
    /// encoded tensor and the (constant) derivative.
    pub fn encode<T: Float>(&self, soft: &Tensor<T>) -> (Tensor<T>, f64) {
        let (hi, lo) = self.saturation_levels();
        let scale = 2.0 / (hi - lo);
        let (s, off) = (T::from_f64_lossy(scale), T::from_f64_lossy(lo));
        (soft.map(|v| (v - off) * s - T::one()), scale)
    }
}
