//! Image, mask and label-map types, color conversion, range normalization
//! and the photometric/geometric augmentation used during training.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenegen::SamplePair;

/// ITU-R BT.601 luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("value {value} at element {index} outside {range:?} range")]
    RangeViolation { index: usize, value: f32, range: ValueRange },
    #[error("expected {expected} elements for {height}x{width}x{channels}, got {found}")]
    Size { height: usize, width: usize, channels: usize, expected: usize, found: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("image must have positive size, got {0}x{1}")]
    Empty(usize, usize),
    #[error("mask value {value} at element {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("label {label} at element {index} is not below class count {classes}")]
    LabelOutOfRange { index: usize, label: u8, classes: usize },
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("invalid class table: {0}")]
    ClassTable(String),
    #[error("invalid augmentation config: {0}")]
    Augmentation(String),
}

/// Closed interval an image's intensities live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`, used for storage and metrics.
    Unit,
    /// `[-1, 1]`, used for network tensors.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }

    pub fn contains(self, v: f32) -> bool {
        let (lo, hi) = self.bounds();
        v >= lo && v <= hi
    }
}

/// Planar (channel-major) `height x width x channels` intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if height == 0 || width == 0 {
            return Err(ImageError::Empty(height, width));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(ImageError::Size { height, width, channels, expected, found: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| !range.contains(v)) {
            return Err(ImageError::RangeViolation { index, value, range });
        }
        Ok(Self { height, width, channels, range, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, range: ValueRange, value: f32) -> Self {
        Self::new(height, width, channels, range, vec![value; height * width * channels])
            .expect("filled image parameters are valid")
    }

    /// Build from interleaved 8-bit RGB or gray bytes.
    pub fn from_u8_interleaved(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        let expected = height * width * channels;
        if bytes.len() != expected {
            return Err(ImageError::Size { height, width, channels, expected, found: bytes.len() });
        }
        let plane = height * width;
        let mut data = vec![0.0; expected];
        for (i, px) in bytes.chunks_exact(channels).enumerate() {
            for (c, &b) in px.iter().enumerate() {
                data[c * plane + i] = b as f32 / 255.0;
            }
        }
        Self::new(height, width, channels, ValueRange::Unit, data)
    }

    /// Interleaved 8-bit bytes of a `[0, 1]` image, rounding to nearest.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; plane * self.channels];
        for c in 0..self.channels {
            for i in 0..plane {
                out[i * self.channels + c] = quantize(self.data[c * plane + i]);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Map every value through `f`, clamping the result into the image's range.
    pub fn map_clamped(&self, f: impl Fn(f32) -> f32) -> Self {
        let (lo, hi) = self.range.bounds();
        Self { data: self.data.iter().map(|&v| f(v).clamp(lo, hi)).collect(), ..self.clone() }
    }

    /// Reinterpret raw data (already known to be in range).
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, range: ValueRange, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self { height, width, channels, range, data }
    }
}

/// Round a unit-range intensity to the nearest 8-bit level.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel dynamic (1) / static (0) indicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Empty(height, width));
        }
        if data.len() != height * width {
            return Err(ImageError::Size { height, width, channels: 1, expected: height * width, found: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(ImageError::NotBinary { index, value });
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    /// Number of dynamic pixels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn matches(&self, img: &Image) -> bool {
        self.height == img.height() && self.width == img.width()
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        Self { height, width, data }
    }
}

/// One semantic class of the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub name: String,
    pub dynamic: bool,
}

/// Ordered class list; the position of a class is its label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: Vec<ClassInfo>,
}

impl ClassTable {
    pub const SKY: u8 = 0;
    pub const BUILDING: u8 = 1;
    pub const ROAD: u8 = 2;
    pub const SIDEWALK: u8 = 3;
    pub const VEHICLE: u8 = 4;
    pub const PEDESTRIAN: u8 = 5;

    /// `{sky, building, road, sidewalk, vehicle, pedestrian}`, the last two dynamic.
    pub fn urban() -> Self {
        let c = |name: &str, dynamic| ClassInfo { name: name.to_string(), dynamic };
        Self {
            classes: vec![
                c("sky", false),
                c("building", false),
                c("road", false),
                c("sidewalk", false),
                c("vehicle", true),
                c("pedestrian", true),
            ],
        }
    }

    pub fn from_names(names: &[(&str, bool)]) -> Result<Self, ImageError> {
        let t = Self {
            classes: names.iter().map(|&(n, d)| ClassInfo { name: n.to_string(), dynamic: d }).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        if self.classes.len() > 256 {
            return Err(ImageError::ClassTable("more than 256 classes".into()));
        }
        let n_dyn = self.dynamic_count();
        if n_dyn == 0 || n_dyn == self.len() {
            return Err(ImageError::ClassTable(format!(
                "dynamic classes must be a nonempty strict subset ({n_dyn} of {})",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dynamic_count(&self) -> usize {
        self.classes.iter().filter(|c| c.dynamic).count()
    }

    pub fn is_dynamic(&self, label: u8) -> bool {
        self.classes.get(label as usize).is_some_and(|c| c.dynamic)
    }

    pub fn dynamic_flags(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.dynamic).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<u8> {
        self.classes.iter().position(|c| c.name == name).map(|i| i as u8)
    }
}

/// Per-pixel class indices together with the table that gives them meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
    classes: Arc<ClassTable>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>, classes: Arc<ClassTable>) -> Result<Self, ImageError> {
        classes.validate()?;
        if height == 0 || width == 0 {
            return Err(ImageError::Empty(height, width));
        }
        if data.len() != height * width {
            return Err(ImageError::Size { height, width, channels: 1, expected: height * width, found: data.len() });
        }
        let n = classes.len();
        if let Some((index, &label)) = data.iter().enumerate().find(|(_, &l)| l as usize >= n) {
            return Err(ImageError::LabelOutOfRange { index, label, classes: n });
        }
        Ok(Self { height, width, data, classes })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn classes(&self) -> &Arc<ClassTable> {
        &self.classes
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>, classes: Arc<ClassTable>) -> Self {
        Self { height, width, data, classes }
    }
}

/// Luma-weighted single-channel version of an RGB image; single-channel
/// input passes through unchanged.
pub fn to_grayscale(img: &Image) -> Image {
    if img.channels() == 1 {
        return img.clone();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let (lo, hi) = img.range().bounds();
    let data = r
        .iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            (LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b).clamp(lo, hi)
        })
        .collect();
    Image::from_raw(img.height(), img.width(), 1, img.range(), data)
}

fn check_range(img: &Image, range: ValueRange) -> Result<(), ImageError> {
    if let Some((index, &value)) = img.data().iter().enumerate().find(|(_, &v)| !range.contains(v)) {
        return Err(ImageError::RangeViolation { index, value, range });
    }
    Ok(())
}

/// Affine map `[0, 1] -> [-1, 1]`.
pub fn normalize(img: &Image) -> Result<Image, ImageError> {
    check_range(img, ValueRange::Unit)?;
    let data = img.data().iter().map(|&v| (2.0 * v - 1.0).clamp(-1.0, 1.0)).collect();
    Ok(Image::from_raw(img.height(), img.width(), img.channels(), ValueRange::Signed, data))
}

/// Affine map `[-1, 1] -> [0, 1]`.
pub fn denormalize(img: &Image) -> Result<Image, ImageError> {
    check_range(img, ValueRange::Signed)?;
    let data = img.data().iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    Ok(Image::from_raw(img.height(), img.width(), img.channels(), ValueRange::Unit, data))
}

/// Pixel is dynamic iff its class is flagged dynamic in the label map's table.
pub fn mask_from_labels(labels: &LabelMap) -> BinaryMask {
    let table = labels.classes();
    let data = labels.data().iter().map(|&l| table.is_dynamic(l) as u8).collect();
    BinaryMask::from_raw(labels.height(), labels.width(), data)
}

/// Random photometric and geometric perturbation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Gaussian blur standard deviation, pixels.
    pub blur_sigma: (f32, f32),
    /// Additive Gaussian noise standard deviation, unit intensity.
    pub noise_sigma: (f32, f32),
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
    pub flip_probability: f32,
    pub seed: u64,
}

impl AugmentationConfig {
    /// Every perturbation pinned at its identity value.
    pub fn identity() -> Self {
        Self {
            blur_sigma: (0.0, 0.0),
            noise_sigma: (0.0, 0.0),
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            flip_probability: 0.0,
            seed: 0,
        }
    }

    /// Moderate ranges for synthetic-to-real style training.
    pub fn moderate() -> Self {
        Self {
            blur_sigma: (0.0, 0.8),
            noise_sigma: (0.0, 0.02),
            brightness: (0.85, 1.15),
            contrast: (0.85, 1.15),
            saturation: (0.8, 1.2),
            flip_probability: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let intervals = [
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ];
        for (name, (lo, hi)) in intervals {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 {
                return Err(ImageError::Augmentation(format!("{name} interval [{lo}, {hi}] is invalid")));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(ImageError::Augmentation(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        Ok(())
    }
}

/// Parameters drawn for one augmentation call.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AugmentDraw {
    flip: bool,
    brightness: f32,
    contrast: f32,
    saturation: f32,
    blur: f32,
    noise: f32,
}

fn draw_in<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    let u: f64 = rng.random();
    (lo as f64 + u * (hi - lo) as f64) as f32
}

/// Apply the same random photometric transform to both images of the pair
/// and the same horizontal flip to every co-registered grid.
pub fn augment<R: Rng + ?Sized>(pair: &SamplePair, cfg: &AugmentationConfig, rng: &mut R) -> SamplePair {
    let u: f64 = rng.random();
    let draw = AugmentDraw {
        flip: u < cfg.flip_probability as f64,
        brightness: draw_in(rng, cfg.brightness),
        contrast: draw_in(rng, cfg.contrast),
        saturation: draw_in(rng, cfg.saturation),
        blur: draw_in(rng, cfg.blur_sigma),
        noise: draw_in(rng, cfg.noise_sigma),
    };

    let mut out = pair.clone();
    if draw.flip {
        out.dynamic_img = flip_image(&out.dynamic_img);
        out.static_img = flip_image(&out.static_img);
        out.labels = LabelMap::from_raw(
            out.labels.height(),
            out.labels.width(),
            flip_plane(out.labels.data(), out.labels.width()),
            out.labels.classes().clone(),
        );
        out.mask = BinaryMask::from_raw(out.mask.height(), out.mask.width(), flip_plane(out.mask.data(), out.mask.width()));
    }

    let photometric = draw.brightness != 1.0
        || draw.contrast != 1.0
        || draw.saturation != 1.0
        || draw.blur > 0.0
        || draw.noise > 0.0;
    if !photometric {
        return out;
    }

    // contrast pivots on the dynamic image's mean luma so both images share it
    let pivot = {
        let g = to_grayscale(&out.dynamic_img);
        g.data().iter().sum::<f32>() / g.data().len() as f32
    };
    let noise_field: Option<Vec<f32>> = (draw.noise > 0.0).then(|| {
        (0..out.dynamic_img.data().len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as f32 * draw.noise
            })
            .collect()
    });
    let apply = |img: &Image| -> Image {
        let mut data = img.data().to_vec();
        let (h, w, c) = (img.height(), img.width(), img.channels());
        if draw.brightness != 1.0 {
            data.iter_mut().for_each(|v| *v *= draw.brightness);
        }
        if draw.contrast != 1.0 {
            data.iter_mut().for_each(|v| *v = (*v - pivot) * draw.contrast + pivot);
        }
        if draw.saturation != 1.0 && c == 3 {
            let p = h * w;
            for i in 0..p {
                let gray = LUMA_WEIGHTS[0] * data[i] + LUMA_WEIGHTS[1] * data[p + i] + LUMA_WEIGHTS[2] * data[2 * p + i];
                for ch in 0..3 {
                    let v = &mut data[ch * p + i];
                    *v = gray + (*v - gray) * draw.saturation;
                }
            }
        }
        if draw.blur > 0.0 {
            data = gaussian_blur(&data, h, w, c, draw.blur);
        }
        if let Some(noise) = &noise_field {
            data.iter_mut().zip(noise).for_each(|(v, n)| *v += n);
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Image::from_raw(h, w, c, img.range(), data)
    };
    out.dynamic_img = apply(&out.dynamic_img);
    out.static_img = apply(&out.static_img);
    out
}

fn flip_plane<T: Copy>(data: &[T], width: usize) -> Vec<T> {
    data.chunks_exact(width).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Horizontal mirror.
pub fn flip_image(img: &Image) -> Image {
    Image::from_raw(img.height(), img.width(), img.channels(), img.range(), flip_plane(img.data(), img.width()))
}

/// Separable Gaussian blur with edge clamping; kernel radius `ceil(3 sigma)`.
pub fn gaussian_blur(data: &[f32], h: usize, w: usize, c: usize, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let src = &data[ch * h * w..(ch + 1) * h * w];
        let t = &mut tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    s += kv * src[y * w + xx];
                }
                t[y * w + x] = s;
            }
        }
        let o = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    s += kv * t[yy * w + x];
                }
                o[y * w + x] = s;
            }
        }
    }
    out
}
