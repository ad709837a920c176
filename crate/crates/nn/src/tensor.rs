use crate::Float;

/// Dense 4-D activation tensor in `[batch, channels, height, width]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Float> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements in one `height x width` plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.offset(n, c, y, x);
        self.data[o] = v;
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    /// One `[channels, height, width]` sample as a flat slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape[1] * self.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape[1] * self.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// One `height x width` channel plane.
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.plane();
        let start = (n * self.shape[1] + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: T) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Concatenate along the channel axis. All parts share batch and spatial size.
    pub fn cat_channels(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "cat of nothing");
        let [n, _, h, w] = parts[0].shape;
        for p in parts {
            assert_eq!((p.shape[0], p.shape[2], p.shape[3]), (n, h, w), "cat shape mismatch");
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(b));
            }
        }
        Self { shape: [n, c, h, w], data }
    }

    /// Inverse of [`Tensor::cat_channels`]: split into consecutive channel groups.
    pub fn split_channels(&self, sizes: &[usize]) -> Vec<Self> {
        assert_eq!(sizes.iter().sum::<usize>(), self.shape[1], "split sizes must cover channels");
        let [n, _, h, w] = self.shape;
        let p = h * w;
        let mut out: Vec<Self> = sizes.iter().map(|&c| Self::zeros([n, c, h, w])).collect();
        for b in 0..n {
            let src = self.sample(b);
            let mut start = 0;
            for (t, &c) in out.iter_mut().zip(sizes) {
                t.sample_mut(b).copy_from_slice(&src[start * p..(start + c) * p]);
                start += c;
            }
        }
        out
    }

    /// Select channels `[start, start + count)`.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(start + count <= c, "channel range out of bounds");
        let p = h * w;
        let mut data = Vec::with_capacity(n * count * p);
        for b in 0..n {
            data.extend_from_slice(&self.sample(b)[start * p..(start + count) * p]);
        }
        Self { shape: [n, count, h, w], data }
    }

    /// Stack single-sample tensors along the batch axis.
    pub fn stack(samples: &[Self]) -> Self {
        assert!(!samples.is_empty(), "stack of nothing");
        let [_, c, h, w] = samples[0].shape;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        let mut n = 0;
        for s in samples {
            assert_eq!(&s.shape[1..], &[c, h, w], "stack shape mismatch");
            data.extend_from_slice(&s.data);
            n += s.shape[0];
        }
        Self { shape: [n, c, h, w], data }
    }

    /// Select a contiguous batch range.
    pub fn narrow_batch(&self, start: usize, count: usize) -> Self {
        let [n, c, h, w] = self.shape;
        assert!(start + count <= n, "batch range out of bounds");
        let len = c * h * w;
        Self {
            shape: [count, c, h, w],
            data: self.data[start * len..(start + count) * len].to_vec(),
        }
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }
}
