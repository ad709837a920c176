use rand::Rng;
use serde::{Deserialize, Serialize};

use stillframe_nn::activation::{leaky_relu, leaky_relu_backward, sigmoid};
use stillframe_nn::conv::Conv2dCache;
use stillframe_nn::norm::InstanceNormCache;
use stillframe_nn::{Conv2d, ConvGeometry, Float, InstanceNorm, Param, Parameters, Tensor};

use super::{ColorMode, ModelError};

const SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Patch classifier: `n_down` stride-2 blocks, one stride-1 block and a
/// 4x4 stride-1 score head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_width: usize,
    pub n_down: usize,
    /// Condition on the mask as well as the observed image.
    pub use_mask: bool,
    pub color: ColorMode,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_width: 64, n_down: 3, use_mask: true, color: ColorMode::Gray }
    }
}

impl DiscriminatorConfig {
    /// Observed image, optional mask, candidate image.
    pub fn input_channels(&self) -> usize {
        2 * self.color.channels() + self.use_mask as usize
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width * (1usize << level.min(3))
    }

    fn geometries(&self) -> Vec<ConvGeometry> {
        let mut g = vec![ConvGeometry::square(4, 2, 1); self.n_down];
        g.push(ConvGeometry::square(4, 1, 1));
        g.push(ConvGeometry::square(4, 1, 1));
        g
    }

    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize), ModelError> {
        if self.n_down == 0 || self.base_width == 0 {
            return Err(ModelError::Config("discriminator needs n_down >= 1 and positive width".into()));
        }
        let mut hw = (height, width);
        for g in self.geometries() {
            hw = g.output_size(hw.0, hw.1).filter(|&(h, w)| h > 0 && w > 0).ok_or_else(|| {
                ModelError::Shape(format!("input {height}x{width} too small for a {}-level patch classifier", self.n_down))
            })?;
        }
        Ok(hw)
    }

    pub fn patch_geometry(&self, height: usize, width: usize) -> Result<PatchGeometry, ModelError> {
        let out = self.output_size(height, width)?;
        Ok(PatchGeometry { layers: self.geometries(), input: (height, width), output: out })
    }
}

/// Input rectangle seen by each cell of the score grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGeometry {
    layers: Vec<ConvGeometry>,
    pub input: (usize, usize),
    pub output: (usize, usize),
}

impl PatchGeometry {
    /// Unclipped receptive-field side lengths.
    pub fn receptive_field(&self) -> (usize, usize) {
        let (a, b) = self.project((0, 0), (0, 0));
        ((b.0 - a.0 + 1) as usize, (b.1 - a.1 + 1) as usize)
    }

    fn project(&self, lo: (isize, isize), hi: (isize, isize)) -> ((isize, isize), (isize, isize)) {
        let (mut lo, mut hi) = (lo, hi);
        for g in self.layers.iter().rev() {
            let (sy, sx) = (g.stride.0 as isize, g.stride.1 as isize);
            let (py, px) = (g.padding.0 as isize, g.padding.1 as isize);
            let (ky, kx) = (g.kernel.0 as isize, g.kernel.1 as isize);
            lo = (lo.0 * sy - py, lo.1 * sx - px);
            hi = (hi.0 * sy - py + ky - 1, hi.1 * sx - px + kx - 1);
        }
        (lo, hi)
    }

    /// Half-open `(y0, y1, x0, x1)` input rectangle of cell `(row, col)`,
    /// clipped to the image.
    pub fn cell_rect(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let (lo, hi) = self.project((row as isize, col as isize), (row as isize, col as isize));
        let (h, w) = (self.input.0 as isize, self.input.1 as isize);
        (
            lo.0.clamp(0, h) as usize,
            (hi.0 + 1).clamp(0, h) as usize,
            lo.1.clamp(0, w) as usize,
            (hi.1 + 1).clamp(0, w) as usize,
        )
    }
}

/// Raw patch logits; scores are their sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchResponse<T> {
    pub logits: Tensor<T>,
}

impl<T: Float> PatchResponse<T> {
    pub fn scores(&self) -> Tensor<T> {
        sigmoid(&self.logits)
    }

    /// Average of all patch scores per sample.
    pub fn mean_scores(&self) -> Vec<f64> {
        let s = self.scores();
        (0..s.batch())
            .map(|b| s.sample(b).iter().map(|v| v.to_f64_lossy()).sum::<f64>() / s.sample(b).len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub config: DiscriminatorConfig,
    layers: Vec<Conv2d<T>>,
    norm: InstanceNorm,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache<T> {
    conv: Vec<Conv2dCache<T>>,
    norm: Vec<Option<InstanceNormCache<T>>>,
    act: Vec<Tensor<T>>,
}

impl<T: Float> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Self {
        let geoms = config.geometries();
        let n = geoms.len();
        let mut layers = Vec::with_capacity(n);
        let mut cin = config.input_channels();
        for (i, g) in geoms.into_iter().enumerate() {
            let head = i == n - 1;
            let cout = if head { 1 } else { config.width_at(i.min(config.n_down)) };
            let bias = i == 0 || head;
            layers.push(Conv2d::new(&format!("disc.conv{i}"), cin, cout, g, bias, INIT_STD, rng));
            cin = cout;
        }
        Self { config, layers, norm: InstanceNorm::default() }
    }

    /// `input` is the channel concatenation of observed image, mask (when
    /// used) and candidate image.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(PatchResponse<T>, DiscriminatorCache<T>), ModelError> {
        let [_, c, h, w] = input.shape();
        if c != self.config.input_channels() {
            return Err(ModelError::Shape(format!(
                "discriminator expects {} input channels, got {c}",
                self.config.input_channels()
            )));
        }
        self.config.output_size(h, w)?;
        let n = self.layers.len();
        let mut cache = DiscriminatorCache { conv: Vec::with_capacity(n), norm: Vec::with_capacity(n), act: Vec::new() };
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (z, cc) = layer.forward(&x);
            cache.conv.push(cc);
            if i == n - 1 {
                cache.norm.push(None);
                x = z;
                break;
            }
            let z = if i > 0 {
                let (y, nc) = self.norm.forward(&z);
                cache.norm.push(Some(nc));
                y
            } else {
                cache.norm.push(None);
                z
            };
            x = leaky_relu(&z, SLOPE);
            cache.act.push(x.clone());
        }
        Ok((PatchResponse { logits: x }, cache))
    }

    /// Gradient of the loss with respect to the logits in, input gradient out.
    pub fn backward(&mut self, cache: &DiscriminatorCache<T>, grad_logits: &Tensor<T>) -> Tensor<T> {
        let n = self.layers.len();
        let mut g = grad_logits.clone();
        for i in (0..n).rev() {
            if i < n - 1 {
                g = leaky_relu_backward(&cache.act[i], &g, SLOPE);
                if let Some(nc) = &cache.norm[i] {
                    g = self.norm.backward(nc, &g);
                }
            }
            g = self.layers[i].backward(&cache.conv[i], &g);
        }
        g
    }
}

impl<T: Float> Parameters<T> for Discriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
