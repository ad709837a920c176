use rand::Rng;
use serde::{Deserialize, Serialize};

use stillframe_nn::activation::{relu, relu_backward};
use stillframe_nn::conv::{Conv2dCache, ConvTranspose2dCache};
use stillframe_nn::norm::InstanceNormCache;
use stillframe_nn::{Conv2d, ConvGeometry, ConvTranspose2d, Float, InstanceNorm, Param, Parameters, Tensor};

use super::{init_std_for, ModelError};

/// Compact encoder/decoder with factorized residual blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentationConfig {
    pub classes: usize,
    pub in_channels: usize,
    /// Width after the first downsampler; doubled after the second.
    pub width: usize,
    /// Residual blocks after each downsampler.
    pub blocks: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { classes: 6, in_channels: 3, width: 16, blocks: 2 }
    }
}

impl SegmentationConfig {
    pub fn check_size(&self, height: usize, width: usize) -> Result<(), ModelError> {
        if self.classes < 2 || self.width == 0 || self.in_channels == 0 {
            return Err(ModelError::Config(format!(
                "segmentation needs >= 2 classes and positive widths, got {} classes",
                self.classes
            )));
        }
        if !height.is_multiple_of(4) || !width.is_multiple_of(4) || height < 8 || width < 8 {
            return Err(ModelError::Divisibility { height, width, required: 4 });
        }
        Ok(())
    }
}

/// Downsampling conv, instance norm, relu.
#[derive(Debug, Clone)]
struct Down<T> {
    conv: Conv2d<T>,
}

/// Factorized residual block: (3x1, relu, 1x3, norm, relu) twice, plus skip.
#[derive(Debug, Clone)]
struct NonBottleneck<T> {
    convs: [Conv2d<T>; 4],
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    conv: Vec<Conv2dCache<T>>,
    norm: Vec<InstanceNormCache<T>>,
    act: Vec<Tensor<T>>,
    out: Tensor<T>,
}

impl<T: Float> NonBottleneck<T> {
    fn new<R: Rng + ?Sized>(name: &str, c: usize, rng: &mut R) -> Self {
        let vertical = ConvGeometry { kernel: (3, 1), stride: (1, 1), padding: (1, 0) };
        let horizontal = ConvGeometry { kernel: (1, 3), stride: (1, 1), padding: (0, 1) };
        let std = init_std_for(3 * c);
        Self {
            convs: [
                Conv2d::new(&format!("{name}.conv0"), c, c, vertical, true, std, rng),
                Conv2d::new(&format!("{name}.conv1"), c, c, horizontal, false, std, rng),
                Conv2d::new(&format!("{name}.conv2"), c, c, vertical, true, std, rng),
                Conv2d::new(&format!("{name}.conv3"), c, c, horizontal, false, std, rng),
            ],
        }
    }

    fn forward(&self, norm: &InstanceNorm, x: &Tensor<T>) -> (Tensor<T>, BlockCache<T>) {
        let mut cache = BlockCache { conv: Vec::new(), norm: Vec::new(), act: Vec::new(), out: Tensor::zeros([0, 0, 0, 0]) };
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            let (z, cc) = conv.forward(&h);
            cache.conv.push(cc);
            if i % 2 == 0 {
                h = relu(&z);
                cache.act.push(h.clone());
            } else {
                let (y, nc) = norm.forward(&z);
                cache.norm.push(nc);
                if i == 1 {
                    h = relu(&y);
                    cache.act.push(h.clone());
                } else {
                    h = y;
                }
            }
        }
        h.add_assign(x);
        let out = relu(&h);
        cache.out = out.clone();
        (out, cache)
    }

    fn backward(&mut self, norm: &InstanceNorm, cache: &BlockCache<T>, gy: &Tensor<T>) -> Tensor<T> {
        let g_sum = relu_backward(&cache.out, gy);
        // act: [after conv0, after norm of conv1, after conv2]
        let mut g = norm.backward(&cache.norm[1], &g_sum);
        g = self.convs[3].backward(&cache.conv[3], &g);
        g = relu_backward(&cache.act[2], &g);
        g = self.convs[2].backward(&cache.conv[2], &g);
        g = relu_backward(&cache.act[1], &g);
        g = norm.backward(&cache.norm[0], &g);
        g = self.convs[1].backward(&cache.conv[1], &g);
        g = relu_backward(&cache.act[0], &g);
        g = self.convs[0].backward(&cache.conv[0], &g);
        g.add_assign(&g_sum);
        g
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationNet<T> {
    pub config: SegmentationConfig,
    down: [Down<T>; 2],
    enc_blocks: Vec<NonBottleneck<T>>,
    mid_up: ConvTranspose2d<T>,
    dec_blocks: Vec<NonBottleneck<T>>,
    out_up: ConvTranspose2d<T>,
    norm: InstanceNorm,
}

#[derive(Debug, Clone)]
pub struct SegmentationCache<T> {
    down_conv: Vec<Conv2dCache<T>>,
    down_norm: Vec<InstanceNormCache<T>>,
    down_act: Vec<Tensor<T>>,
    enc_blocks: Vec<BlockCache<T>>,
    mid_conv: Option<ConvTranspose2dCache<T>>,
    mid_norm: Option<InstanceNormCache<T>>,
    mid_act: Tensor<T>,
    dec_blocks: Vec<BlockCache<T>>,
    out_conv: Option<ConvTranspose2dCache<T>>,
}

impl<T: Float> SegmentationNet<T> {
    pub fn new<R: Rng + ?Sized>(config: SegmentationConfig, rng: &mut R) -> Self {
        let (w, w2) = (config.width, 2 * config.width);
        let down_geom = ConvGeometry::square(3, 2, 1);
        let up_geom = ConvGeometry::square(4, 2, 1);
        let down = [
            Down { conv: Conv2d::new("seg.down0", config.in_channels, w, down_geom, false, init_std_for(9 * config.in_channels), rng) },
            Down { conv: Conv2d::new("seg.down1", w, w2, down_geom, false, init_std_for(9 * w), rng) },
        ];
        let mut enc_blocks = Vec::new();
        for i in 0..config.blocks {
            enc_blocks.push(NonBottleneck::new(&format!("seg.enc{i}"), w2, rng));
        }
        let mid_up = ConvTranspose2d::new("seg.up0", w2, w, up_geom, false, init_std_for(4 * w2), rng);
        let dec_blocks = (0..config.blocks.min(1)).map(|i| NonBottleneck::new(&format!("seg.dec{i}"), w, rng)).collect();
        let out_up = ConvTranspose2d::new("seg.up1", w, config.classes, up_geom, true, init_std_for(4 * w), rng);
        Self { config, down, enc_blocks, mid_up, dec_blocks, out_up, norm: InstanceNorm::default() }
    }

    /// Per-pixel class logits `[N, classes, H, W]`.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, SegmentationCache<T>), ModelError> {
        let [_, c, h, w] = input.shape();
        if c != self.config.in_channels {
            return Err(ModelError::Shape(format!(
                "segmentation expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        self.config.check_size(h, w)?;
        let mut cache = SegmentationCache {
            down_conv: Vec::new(),
            down_norm: Vec::new(),
            down_act: Vec::new(),
            enc_blocks: Vec::new(),
            mid_conv: None,
            mid_norm: None,
            mid_act: Tensor::zeros([0, 0, 0, 0]),
            dec_blocks: Vec::new(),
            out_conv: None,
        };
        let mut x = input.clone();
        for d in &self.down {
            let (z, cc) = d.conv.forward(&x);
            let (y, nc) = self.norm.forward(&z);
            x = relu(&y);
            cache.down_conv.push(cc);
            cache.down_norm.push(nc);
            cache.down_act.push(x.clone());
        }
        for b in &self.enc_blocks {
            let (y, bc) = b.forward(&self.norm, &x);
            cache.enc_blocks.push(bc);
            x = y;
        }
        let (z, cc) = self.mid_up.forward(&x);
        let (y, nc) = self.norm.forward(&z);
        x = relu(&y);
        cache.mid_conv = Some(cc);
        cache.mid_norm = Some(nc);
        cache.mid_act = x.clone();
        for b in &self.dec_blocks {
            let (y, bc) = b.forward(&self.norm, &x);
            cache.dec_blocks.push(bc);
            x = y;
        }
        let (logits, oc) = self.out_up.forward(&x);
        cache.out_conv = Some(oc);
        Ok((logits, cache))
    }

    pub fn backward(&mut self, cache: &SegmentationCache<T>, grad_logits: &Tensor<T>) -> Tensor<T> {
        let mut g = self.out_up.backward(cache.out_conv.as_ref().expect("forward ran"), grad_logits);
        for (b, bc) in self.dec_blocks.iter_mut().zip(&cache.dec_blocks).rev() {
            g = b.backward(&self.norm, bc, &g);
        }
        g = relu_backward(&cache.mid_act, &g);
        g = self.norm.backward(cache.mid_norm.as_ref().expect("forward ran"), &g);
        g = self.mid_up.backward(cache.mid_conv.as_ref().expect("forward ran"), &g);
        for (b, bc) in self.enc_blocks.iter_mut().zip(&cache.enc_blocks).rev() {
            g = b.backward(&self.norm, bc, &g);
        }
        for i in (0..2).rev() {
            g = relu_backward(&cache.down_act[i], &g);
            g = self.norm.backward(&cache.down_norm[i], &g);
            g = self.down[i].conv.backward(&cache.down_conv[i], &g);
        }
        g
    }
}

/// Class index with the largest logit at every pixel of sample `index`.
pub fn argmax_labels<T: Float>(logits: &Tensor<T>, index: usize) -> Vec<u8> {
    let [_, c, h, w] = logits.shape();
    let p = h * w;
    let s = logits.sample(index);
    (0..p)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if s[ch * p + i] > s[best * p + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

impl<T: Float> Parameters<T> for SegmentationNet<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.down.iter().for_each(|d| d.conv.visit(f));
        for b in &self.enc_blocks {
            b.convs.iter().for_each(|c| c.visit(f));
        }
        self.mid_up.visit(f);
        for b in &self.dec_blocks {
            b.convs.iter().for_each(|c| c.visit(f));
        }
        self.out_up.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.down.iter_mut().for_each(|d| d.conv.visit_mut(f));
        for b in &mut self.enc_blocks {
            b.convs.iter_mut().for_each(|c| c.visit_mut(f));
        }
        self.mid_up.visit_mut(f);
        for b in &mut self.dec_blocks {
            b.convs.iter_mut().for_each(|c| c.visit_mut(f));
        }
        self.out_up.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logits_match_input_size_and_argmax_is_valid() {
        let cfg = SegmentationConfig { width: 4, blocks: 1, ..Default::default() };
        let net = SegmentationNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec([2, 3, 16, 16], (0..2 * 3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (logits, _) = net.forward(&x).unwrap();
        assert_eq!(logits.shape(), [2, 6, 16, 16]);
        assert!(argmax_labels(&logits, 1).iter().all(|&l| l < 6));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let net = SegmentationNet::<f32>::new(SegmentationConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(net.forward(&Tensor::zeros([1, 1, 16, 16])).is_err());
    }
}
