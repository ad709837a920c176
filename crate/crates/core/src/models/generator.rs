use rand::Rng;
use serde::{Deserialize, Serialize};

use stillframe_nn::activation::{leaky_relu, leaky_relu_backward, relu, relu_backward, tanh, tanh_backward};
use stillframe_nn::conv::{Conv2dCache, ConvTranspose2dCache};
use stillframe_nn::norm::InstanceNormCache;
use stillframe_nn::{Conv2d, ConvGeometry, ConvTranspose2d, Float, InstanceNorm, Param, Parameters, Tensor};

use super::{ColorMode, ModelError};

const SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// U-Net encoder/decoder with a skip connection at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Number of stride-2 levels; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub base_width: usize,
    /// Feed the mask as an extra input channel.
    pub use_mask: bool,
    pub color: ColorMode,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { depth: 6, base_width: 64, use_mask: true, color: ColorMode::Gray }
    }
}

impl GeneratorConfig {
    pub fn input_channels(&self) -> usize {
        self.color.channels() + self.use_mask as usize
    }

    pub fn level_width(&self, level: usize) -> usize {
        self.base_width * (1usize << level.min(3))
    }

    pub fn check_size(&self, height: usize, width: usize) -> Result<(), ModelError> {
        if self.depth < 2 || self.base_width == 0 {
            return Err(ModelError::Config(format!(
                "generator needs depth >= 2 and positive width, got depth {} width {}",
                self.depth, self.base_width
            )));
        }
        let required = 1usize << self.depth;
        if !height.is_multiple_of(required) || !width.is_multiple_of(required) || height == 0 || width == 0 {
            return Err(ModelError::Divisibility { height, width, required });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    down: Vec<Conv2d<T>>,
    up: Vec<ConvTranspose2d<T>>,
    norm: InstanceNorm,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache<T> {
    // encoder level i: input activation, conv cache, norm cache
    enc_act: Vec<Option<Tensor<T>>>,
    enc_conv: Vec<Conv2dCache<T>>,
    enc_norm: Vec<Option<InstanceNormCache<T>>>,
    skip_widths: Vec<usize>,
    // decoder level i: relu output, convT cache, norm cache
    dec_act: Vec<Tensor<T>>,
    dec_conv: Vec<ConvTranspose2dCache<T>>,
    dec_norm: Vec<Option<InstanceNormCache<T>>>,
    output: Tensor<T>,
}

impl<T: Float> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Self {
        let geom = ConvGeometry::square(4, 2, 1);
        let d = config.depth;
        let out_channels = config.color.channels();
        let mut down = Vec::with_capacity(d);
        let mut cin = config.input_channels();
        for i in 0..d {
            let c = config.level_width(i);
            // bias only where no normalization follows
            let bias = i == 0 || i == d - 1;
            down.push(Conv2d::new(&format!("gen.down{i}"), cin, c, geom, bias, INIT_STD, rng));
            cin = c;
        }
        let mut up = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == d - 1 { config.level_width(i) } else { 2 * config.level_width(i) };
            let cout = if i == 0 { out_channels } else { config.level_width(i - 1) };
            up.push(ConvTranspose2d::new(&format!("gen.up{i}"), cin, cout, geom, i == 0, INIT_STD, rng));
        }
        Self { config, down, up, norm: InstanceNorm::default() }
    }

    fn normalized_level(&self, i: usize) -> bool {
        i > 0 && i < self.config.depth - 1
    }

    /// `input` holds the image channels followed by the mask channel when
    /// the configuration uses one. Output has the image channel count.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, GeneratorCache<T>), ModelError> {
        let [_, c, h, w] = input.shape();
        if c != self.config.input_channels() {
            return Err(ModelError::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.config.input_channels()
            )));
        }
        self.config.check_size(h, w)?;
        let d = self.config.depth;

        let mut enc: Vec<Tensor<T>> = Vec::with_capacity(d);
        let mut enc_act = Vec::with_capacity(d);
        let mut enc_conv = Vec::with_capacity(d);
        let mut enc_norm = Vec::with_capacity(d);
        for i in 0..d {
            let (z, cc) = if i == 0 {
                enc_act.push(None);
                self.down[0].forward(input)
            } else {
                let a = leaky_relu(&enc[i - 1], SLOPE);
                let out = self.down[i].forward(&a);
                enc_act.push(Some(a));
                out
            };
            enc_conv.push(cc);
            if self.normalized_level(i) {
                let (y, nc) = self.norm.forward(&z);
                enc_norm.push(Some(nc));
                enc.push(y);
            } else {
                enc_norm.push(None);
                enc.push(z);
            }
        }

        let mut dec_act = vec![Tensor::zeros([0, 0, 0, 0]); d];
        let mut dec_conv: Vec<Option<ConvTranspose2dCache<T>>> = (0..d).map(|_| None).collect();
        let mut dec_norm: Vec<Option<InstanceNormCache<T>>> = (0..d).map(|_| None).collect();
        let mut skip_widths = vec![0; d];
        let mut u: Option<Tensor<T>> = None;
        let mut output = None;
        for i in (0..d).rev() {
            let joined = match &u {
                None => enc[i].clone(),
                Some(u) => {
                    skip_widths[i] = enc[i].channels();
                    Tensor::cat_channels(&[&enc[i], u])
                }
            };
            let a = relu(&joined);
            let (z, cc) = self.up[i].forward(&a);
            dec_act[i] = a;
            dec_conv[i] = Some(cc);
            if i == 0 {
                output = Some(tanh(&z));
            } else {
                let (y, nc) = self.norm.forward(&z);
                dec_norm[i] = Some(nc);
                u = Some(y);
            }
        }
        let output = output.expect("depth >= 1");
        let cache = GeneratorCache {
            enc_act,
            enc_conv,
            enc_norm,
            skip_widths,
            dec_act,
            dec_conv: dec_conv.into_iter().map(|c| c.expect("every level ran")).collect(),
            dec_norm,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Accumulate parameter gradients for `d loss / d output` and return the
    /// gradient with respect to the input.
    pub fn backward(&mut self, cache: &GeneratorCache<T>, grad_output: &Tensor<T>) -> Tensor<T> {
        let d = self.config.depth;
        let mut g_enc: Vec<Option<Tensor<T>>> = (0..d).map(|_| None).collect();
        let mut g = tanh_backward(&cache.output, grad_output);
        for i in 0..d {
            if i > 0 {
                g = self.norm.backward(cache.dec_norm[i].as_ref().expect("normalized"), &g);
            }
            let ga = self.up[i].backward(&cache.dec_conv[i], &g);
            let gj = relu_backward(&cache.dec_act[i], &ga);
            if i == d - 1 {
                add_into(&mut g_enc[i], gj);
            } else {
                let skip = cache.skip_widths[i];
                let mut parts = gj.split_channels(&[skip, gj.channels() - skip]);
                let gu = parts.pop().expect("two parts");
                add_into(&mut g_enc[i], parts.pop().expect("two parts"));
                g = gu;
            }
        }
        let mut g_input = None;
        for i in (0..d).rev() {
            let mut ge = g_enc[i].take().expect("every level has a gradient");
            if let Some(nc) = &cache.enc_norm[i] {
                ge = self.norm.backward(nc, &ge);
            }
            let ga = self.down[i].backward(&cache.enc_conv[i], &ge);
            match &cache.enc_act[i] {
                Some(a) => add_into(&mut g_enc[i - 1], leaky_relu_backward(a, &ga, SLOPE)),
                None => g_input = Some(ga),
            }
        }
        g_input.expect("level 0 reached")
    }
}

fn add_into<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Float> Parameters<T> for Generator<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.down.iter().for_each(|l| l.visit(f));
        self.up.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.down.iter_mut().for_each(|l| l.visit_mut(f));
        self.up.iter_mut().for_each(|l| l.visit_mut(f));
    }
}
