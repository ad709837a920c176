//! 2-D convolution and transposed convolution lowered to gemm through
//! im2col / col2im.

use rand::Rng;

use crate::float::{matmul, Trans};
use crate::{Float, Param, Parameters, Tensor};

/// Kernel size, stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: (kernel, kernel), stride: (stride, stride), padding: (padding, padding) }
    }

    /// Output size of the forward convolution, or `None` if the kernel does
    /// not fit in the padded input.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize| {
            (n + 2 * p >= k).then(|| (n + 2 * p - k) / s + 1)
        };
        Some((
            dim(h, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }

    /// Output size of the transposed convolution.
    pub fn transposed_output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize| {
            let full = (n.checked_sub(1)?) * s + k;
            full.checked_sub(2 * p).filter(|&v| v > 0)
        };
        Some((
            dim(h, self.kernel.0, self.stride.0, self.padding.0)?,
            dim(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

/// Unfold one `[c, h, w]` image into columns of a `[c*kh*kw, ld]` matrix,
/// writing output positions starting at column `col0`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Float>(
    src: &[T],
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
    dst: &mut [T],
    ld: usize,
    col0: usize,
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let out = &mut dst[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut out[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Float>(
    cols: &[T],
    ld: usize,
    col0: usize,
    (c, h, w): (usize, usize, usize),
    g: &ConvGeometry,
    (oh, ow): (usize, usize),
    dst: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col = &cols[row * ld + col0..row * ld + col0 + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += col[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[b, c, p]` tensor data to a `[c, b*p]` matrix.
fn to_channel_major<T: Float>(x: &Tensor<T>) -> Vec<T> {
    let [n, c, _, _] = x.shape();
    let p = x.plane();
    let mut out = vec![T::zero(); n * c * p];
    for b in 0..n {
        for ci in 0..c {
            out[ci * n * p + b * p..ci * n * p + (b + 1) * p].copy_from_slice(x.channel(b, ci));
        }
    }
    out
}

/// Inverse of [`to_channel_major`], adding a per-channel bias.
fn from_channel_major<T: Float>(m: &[T], shape: [usize; 4], bias: Option<&[T]>) -> Tensor<T> {
    let [n, c, h, w] = shape;
    let p = h * w;
    let mut out = Tensor::zeros(shape);
    for b in 0..n {
        for ci in 0..c {
            let src = &m[ci * n * p + b * p..ci * n * p + (b + 1) * p];
            let dst = out.channel_mut(b, ci);
            match bias {
                Some(bias) => {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + bias[ci];
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

fn accumulate_bias_grad<T: Float>(gy: &Tensor<T>, grad: &mut [T]) {
    let [n, c, _, _] = gy.shape();
    for b in 0..n {
        for (ci, g) in grad.iter_mut().enumerate().take(c) {
            *g += gy.channel(b, ci).iter().copied().sum();
        }
    }
}

/// Standard cross-correlation layer with optional bias.
/// Weight layout `[out, in, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct Conv2dCache<T> {
    cols: Vec<T>,
    input_shape: [usize; 4],
    output_hw: (usize, usize),
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = geometry.kernel;
        Self {
            weight: Param::normal(
                format!("{name}.weight"),
                &[out_channels, in_channels, kh, kw],
                init_std,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_channels])),
            in_channels,
            out_channels,
            geometry,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.geometry.output_size(h, w)
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, Conv2dCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "{}: input channels", self.weight.name);
        let (oh, ow) = self
            .geometry
            .output_size(h, w)
            .unwrap_or_else(|| panic!("{}: kernel larger than input {h}x{w}", self.weight.name));
        let (kh, kw) = self.geometry.kernel;
        let k = c * kh * kw;
        let p = oh * ow;
        let ld = n * p;
        let mut cols = vec![T::zero(); k * ld];
        for b in 0..n {
            im2col(x.sample(b), (c, h, w), &self.geometry, (oh, ow), &mut cols, ld, b * p);
        }
        let mut out = vec![T::zero(); self.out_channels * ld];
        matmul(self.out_channels, k, ld, &self.weight.value, Trans::No, &cols, Trans::No, &mut out, false);
        let y = from_channel_major(
            &out,
            [n, self.out_channels, oh, ow],
            self.bias.as_ref().map(|b| b.value.as_slice()),
        );
        (y, Conv2dCache { cols, input_shape: x.shape(), output_hw: (oh, ow) })
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = cache.input_shape;
        let (oh, ow) = cache.output_hw;
        assert_eq!(gy.shape(), [n, self.out_channels, oh, ow], "{}: grad shape", self.weight.name);
        let (kh, kw) = self.geometry.kernel;
        let k = c * kh * kw;
        let p = oh * ow;
        let ld = n * p;
        let gmat = to_channel_major(gy);
        matmul(
            self.out_channels,
            ld,
            k,
            &gmat,
            Trans::No,
            &cache.cols,
            Trans::Yes,
            &mut self.weight.grad,
            true,
        );
        if let Some(bias) = self.bias.as_mut() {
            accumulate_bias_grad(gy, &mut bias.grad);
        }
        let mut gcols = vec![T::zero(); k * ld];
        matmul(k, self.out_channels, ld, &self.weight.value, Trans::Yes, &gmat, Trans::No, &mut gcols, false);
        let mut gx = Tensor::zeros(cache.input_shape);
        for b in 0..n {
            col2im(&gcols, ld, b * p, (c, h, w), &self.geometry, (oh, ow), gx.sample_mut(b));
        }
        gx
    }
}

impl<T: Float> Parameters<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`] with the same geometry).
/// Weight layout `[in, out, kh, kw]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2dCache<T> {
    input: Vec<T>,
    input_shape: [usize; 4],
    output_hw: (usize, usize),
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        bias: bool,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = geometry.kernel;
        Self {
            weight: Param::normal(
                format!("{name}.weight"),
                &[in_channels, out_channels, kh, kw],
                init_std,
                rng,
            ),
            bias: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_channels])),
            in_channels,
            out_channels,
            geometry,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvTranspose2dCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "{}: input channels", self.weight.name);
        let (oh, ow) = self
            .geometry
            .transposed_output_size(h, w)
            .unwrap_or_else(|| panic!("{}: degenerate transposed size", self.weight.name));
        let (kh, kw) = self.geometry.kernel;
        let rows = self.out_channels * kh * kw;
        let p = h * w;
        let ld = n * p;
        let xm = to_channel_major(x);
        let mut cols = vec![T::zero(); rows * ld];
        matmul(rows, c, ld, &self.weight.value, Trans::Yes, &xm, Trans::No, &mut cols, false);
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        for b in 0..n {
            col2im(&cols, ld, b * p, (self.out_channels, oh, ow), &self.geometry, (h, w), y.sample_mut(b));
        }
        if let Some(bias) = &self.bias {
            for b in 0..n {
                for (co, &bv) in bias.value.iter().enumerate() {
                    y.channel_mut(b, co).iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        (y, ConvTranspose2dCache { input: xm, input_shape: x.shape(), output_hw: (oh, ow) })
    }

    pub fn backward(&mut self, cache: &ConvTranspose2dCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = cache.input_shape;
        let (oh, ow) = cache.output_hw;
        assert_eq!(gy.shape(), [n, self.out_channels, oh, ow], "{}: grad shape", self.weight.name);
        let (kh, kw) = self.geometry.kernel;
        let rows = self.out_channels * kh * kw;
        let p = h * w;
        let ld = n * p;
        let mut gcols = vec![T::zero(); rows * ld];
        for b in 0..n {
            im2col(gy.sample(b), (self.out_channels, oh, ow), &self.geometry, (h, w), &mut gcols, ld, b * p);
        }
        matmul(c, ld, rows, &cache.input, Trans::No, &gcols, Trans::Yes, &mut self.weight.grad, true);
        if let Some(bias) = self.bias.as_mut() {
            accumulate_bias_grad(gy, &mut bias.grad);
        }
        let mut gxm = vec![T::zero(); c * ld];
        matmul(c, rows, ld, &self.weight.value, Trans::No, &gcols, Trans::No, &mut gxm, false);
        from_channel_major(&gxm, cache.input_shape, None)
    }
}

impl<T: Float> Parameters<T> for ConvTranspose2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
