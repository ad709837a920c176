use crate::{Float, Tensor};

/// Per-sample, per-channel normalization over the spatial plane (no affine
/// parameters). Requires planes with more than one element to be meaningful.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm {
    pub eps: f64,
}

impl Default for InstanceNorm {
    fn default() -> Self {
        Self { eps: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl InstanceNorm {
    pub fn forward<T: Float>(&self, x: &Tensor<T>) -> (Tensor<T>, InstanceNormCache<T>) {
        let [n, c, _, _] = x.shape();
        let p = T::from_usize(x.plane()).unwrap();
        let eps = T::from_f64_lossy(self.eps);
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let src = x.channel(b, ch);
                let mean = src.iter().copied().sum::<T>() / p;
                let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / p;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (d, &s) in y.channel_mut(b, ch).iter_mut().zip(src) {
                    *d = (s - mean) * is;
                }
            }
        }
        (y.clone(), InstanceNormCache { normalized: y, inv_std })
    }

    pub fn backward<T: Float>(&self, cache: &InstanceNormCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let xh = &cache.normalized;
        let [n, c, _, _] = xh.shape();
        let p = T::from_usize(xh.plane()).unwrap();
        let mut gx = Tensor::zeros(xh.shape());
        for b in 0..n {
            for ch in 0..c {
                let g = gy.channel(b, ch);
                let h = xh.channel(b, ch);
                let mean_g = g.iter().copied().sum::<T>() / p;
                let mean_gh = g.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / p;
                let is = cache.inv_std[b * c + ch];
                for ((d, &gv), &hv) in gx.channel_mut(b, ch).iter_mut().zip(g).zip(h) {
                    *d = is * (gv - mean_g - hv * mean_gh);
                }
            }
        }
        gx
    }
}
