//! Elementwise activations. Each backward takes the forward OUTPUT.

use crate::{Float, Tensor};

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn relu_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(gy, |y, g| if y > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu<T: Float>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64_lossy(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

/// Valid for positive slopes, where the output keeps the input's sign.
pub fn leaky_relu_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64_lossy(slope);
    y.zip_map(gy, |y, g| if y > T::zero() { g } else { g * s })
}

pub fn tanh<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn tanh_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(gy, |y, g| g * (T::one() - y * y))
}

pub fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Float>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    y.zip_map(gy, |y, g| g * y * (T::one() - y))
}

/// Softmax over the channel axis at every pixel.
pub fn softmax_channels<T: Float>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let p = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for b in 0..n {
        let src = logits.sample(b);
        let dst = out.sample_mut(b);
        for i in 0..p {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(src[ch * p + i]);
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[ch * p + i] - max).exp();
                dst[ch * p + i] = e;
                sum += e;
            }
            for ch in 0..c {
                dst[ch * p + i] /= sum;
            }
        }
    }
    out
}

/// Backward of [`softmax_channels`] given its output.
pub fn softmax_channels_backward<T: Float>(probs: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = probs.shape();
    let p = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..n {
        let s = probs.sample(b);
        let g = gy.sample(b);
        let dst = out.sample_mut(b);
        for i in 0..p {
            let dot: T = (0..c).map(|ch| s[ch * p + i] * g[ch * p + i]).sum();
            for ch in 0..c {
                dst[ch * p + i] = s[ch * p + i] * (g[ch * p + i] - dot);
            }
        }
    }
    out
}
