//! Alternating adversarial training: a discriminator update, then a
//! generator update, then (optionally) a segmentation update that also
//! receives the adversarial gradient through the soft mask.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use stillframe_nn::{Adam, AdamState, Parameters, Tensor};

use crate::evaluation::{dataset_hash, evaluate_model, EvalError, MetricsReport};
use crate::imagecore::{augment, AugmentationConfig, BinaryMask, ClassTable, Image, ImageError};
use crate::losses::{
    discriminator_loss_logits, generator_adversarial_logits, l1_loss_tensor, patch_weight_map, segmentation_loss,
    weight_tensor, LossError, LossWeights,
};
use crate::models::{
    images_to_tensor, load_checkpoint, load_checkpoint_expecting, masks_to_tensor, save_checkpoint, to_color_mode, ColorMode,
    DiscriminatorConfig, DynamicHead, GeneratorConfig, MaskSource, ModelBundle, ModelConfig, ModelError,
    PatchGeometry, SegmentationConfig,
};
use crate::scenegen::{class_weights, load_dataset, read_manifest, DatasetError, SamplePair};

pub const LATEST_CHECKPOINT: &str = "latest.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    NonFinite(Box<Diagnostics>),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Snapshot taken when a loss or gradient stops being finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub step: u64,
    pub phase: String,
    pub losses: StepLosses,
}

impl fmt::Display for Diagnostics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-finite value in the {} phase at step {}: losses {}",
            self.phase,
            self.step,
            serde_json::to_string(&self.losses).unwrap_or_default()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl OptimizerConfig {
    fn adam(&self, state: &AdamState<f32>) -> Adam<f32> {
        let mut a = Adam::new(self.lr, self.beta1, self.beta2);
        a.set_state(state.clone());
        a
    }

    fn validate(&self, name: &str) -> Result<(), TrainError> {
        let ok = self.lr > 0.0 && self.lr.is_finite() && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!("{name} optimizer: lr must be > 0 and betas in [0, 1)")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Optimizers {
    pub generator: OptimizerConfig,
    pub discriminator: OptimizerConfig,
    pub segmentation: OptimizerConfig,
}

impl Default for Optimizers {
    fn default() -> Self {
        let gan = OptimizerConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999 };
        Self {
            generator: gan.clone(),
            discriminator: gan,
            segmentation: OptimizerConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999 },
        }
    }
}

/// Network sizes. The color mode and mask inputs come from [`Ablation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub generator_depth: usize,
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub discriminator_layers: usize,
    pub segmentation_width: usize,
    pub segmentation_blocks: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            generator_depth: 6,
            generator_width: 64,
            discriminator_width: 64,
            discriminator_layers: 3,
            segmentation_width: 16,
            segmentation_blocks: 2,
        }
    }
}

/// Which inputs the networks see and where masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub color: ColorMode,
    pub generator_mask: bool,
    pub discriminator_mask: bool,
    /// `segmentation` trains the segmentation branch jointly and feeds its
    /// masks forward; `ground_truth` freezes masks to the dataset's.
    pub masks: MaskSource,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { color: ColorMode::Gray, generator_mask: true, discriminator_mask: true, masks: MaskSource::Segmentation }
    }
}

/// The four columns of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// RGB, no mask anywhere.
    RgbPlain,
    /// Grayscale, no mask anywhere.
    GrayPlain,
    /// Mask given to the generator only.
    MaskedGenerator,
    /// Mask given to both networks, with mask-weighted adversarial loss.
    MaskedBoth,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::RgbPlain, Variant::GrayPlain, Variant::MaskedGenerator, Variant::MaskedBoth];

    pub fn slug(self) -> &'static str {
        match self {
            Variant::RgbPlain => "rgb_plain",
            Variant::GrayPlain => "gray_plain",
            Variant::MaskedGenerator => "masked_generator",
            Variant::MaskedBoth => "masked_both",
        }
    }

    pub fn ablation(self) -> Ablation {
        let (color, g, d) = match self {
            Variant::RgbPlain => (ColorMode::Rgb, false, false),
            Variant::GrayPlain => (ColorMode::Gray, false, false),
            Variant::MaskedGenerator => (ColorMode::Gray, true, false),
            Variant::MaskedBoth => (ColorMode::Gray, true, true),
        };
        Ablation { color, generator_mask: g, discriminator_mask: d, masks: MaskSource::GroundTruth }
    }

    /// Patch emphasis; only the full variant weights masked patches.
    pub fn gamma(self, base: f64) -> f64 {
        if self == Variant::MaskedBoth {
            base
        } else {
            1.0
        }
    }

    pub fn of(ablation: &Ablation) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| {
            let a = v.ablation();
            (a.color, a.generator_mask, a.discriminator_mask) == (ablation.color, ablation.generator_mask, ablation.discriminator_mask)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_split: String,
    /// Held-out split for per-epoch validation.
    pub validation_split: Option<String>,
    /// Split scored by the ablation grid; the validation split when absent.
    pub test_split: Option<String>,
    pub train_limit: Option<usize>,
    pub validation_limit: Option<usize>,
    /// Dataset holding unpaired real images.
    pub real_root: Option<PathBuf>,
    pub real_split: String,
    /// Fraction of batches drawn from the real data.
    pub real_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_split: "train".into(),
            validation_split: Some("val".into()),
            test_split: Some("test".into()),
            train_limit: None,
            validation_limit: None,
            real_root: None,
            real_split: "real".into(),
            real_ratio: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub architecture: Architecture,
    pub ablation: Ablation,
    pub optimizers: Optimizers,
    pub loss: LossWeights,
    pub augmentation: AugmentationConfig,
    /// Epochs of cross-entropy-only segmentation updates.
    pub warmup_epochs: usize,
    pub data: DataConfig,
    /// Where checkpoints go; none are written when absent.
    pub checkpoint_dir: Option<PathBuf>,
    /// Write `latest` every this many epochs (and always after the last).
    pub checkpoint_every: usize,
    /// Continue from `latest` in `checkpoint_dir` when it exists.
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            seed: 0,
            architecture: Architecture::default(),
            ablation: Ablation::default(),
            optimizers: Optimizers::default(),
            loss: LossWeights::default(),
            augmentation: AugmentationConfig::identity(),
            warmup_epochs: 2,
            data: DataConfig::default(),
            checkpoint_dir: None,
            checkpoint_every: 1,
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::Config("checkpoint_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.data.real_ratio) {
            return Err(TrainError::Config(format!("real_ratio {} outside [0, 1]", self.data.real_ratio)));
        }
        if self.data.real_ratio > 0.0 && self.data.real_root.is_none() {
            return Err(TrainError::Config("real_ratio > 0 needs data.real_root".into()));
        }
        self.optimizers.generator.validate("generator")?;
        self.optimizers.discriminator.validate("discriminator")?;
        self.optimizers.segmentation.validate("segmentation")?;
        self.loss.validate()?;
        self.augmentation.validate()?;
        Ok(())
    }

    /// Architecture of the bundle this configuration trains.
    pub fn model_config(&self, height: usize, width: usize, classes: usize) -> ModelConfig {
        let a = &self.architecture;
        let ab = &self.ablation;
        ModelConfig {
            height,
            width,
            generator: GeneratorConfig {
                depth: a.generator_depth,
                base_width: a.generator_width,
                use_mask: ab.generator_mask,
                color: ab.color,
            },
            discriminator: DiscriminatorConfig {
                base_width: a.discriminator_width,
                n_down: a.discriminator_layers,
                use_mask: ab.discriminator_mask,
                color: ab.color,
            },
            segmentation: (ab.masks == MaskSource::Segmentation).then_some(SegmentationConfig {
                classes,
                in_channels: 3,
                width: a.segmentation_width,
                blocks: a.segmentation_blocks,
            }),
        }
    }

    /// Configuration for one ablation column: frozen ground-truth masks and
    /// checkpoints in a per-variant subdirectory.
    pub fn for_variant(&self, variant: Variant) -> TrainConfig {
        let mut c = self.clone();
        c.ablation = variant.ablation();
        c.loss.gamma = variant.gamma(self.loss.gamma);
        c.checkpoint_dir = self.checkpoint_dir.as_ref().map(|d| d.join(variant.slug()));
        c
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Losses of one step; phases that did not run are `None`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: u64,
    pub real: bool,
    pub discriminator: Option<f64>,
    pub generator_adversarial: Option<f64>,
    pub generator_l1: f64,
    pub segmentation_ce: Option<f64>,
    pub segmentation_adversarial: Option<f64>,
    /// Gradient norms seen by each optimizer this step.
    pub grad_norm_generator: f64,
    pub grad_norm_discriminator: Option<f64>,
    pub grad_norm_segmentation: Option<f64>,
}

/// Means of the losses over some steps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossAverages {
    pub discriminator: Option<f64>,
    pub generator_adversarial: Option<f64>,
    pub generator_l1: Option<f64>,
    pub segmentation_ce: Option<f64>,
}

impl LossAverages {
    pub fn of(steps: &[StepLosses]) -> Self {
        let mean = |f: &dyn Fn(&StepLosses) -> Option<f64>| {
            let v: Vec<f64> = steps.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Self {
            discriminator: mean(&|s| s.discriminator),
            generator_adversarial: mean(&|s| s.generator_adversarial),
            generator_l1: mean(&|s| Some(s.generator_l1)),
            segmentation_ce: mean(&|s| s.segmentation_ce),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub l1: f64,
    pub l1_mask: Option<f64>,
    pub l1_no_mask: Option<f64>,
}

impl From<&MetricsReport> for ValidationMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self { l1: r.l1, l1_mask: r.l1_mask, l1_no_mask: r.l1_no_mask }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossAverages,
    pub validation: Option<ValidationMetrics>,
}

/// Training bookkeeping stored inside every checkpoint. The rng lives in
/// the bundle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    /// Averages over the epoch in progress.
    pub running: LossAverages,
    pub best_l1_mask: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    pub trace: Vec<StepLosses>,
}

/// Which parameter set an update phase owns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
    Segmentation,
}

/// When an observer is called within a phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Gradients accumulated, parameters not yet moved.
    Gradients,
    Updated,
}

/// Mutable training context around a bundle.
pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    pub state: TrainState,
    head: DynamicHead,
    geometry: PatchGeometry,
    class_weights: Vec<f32>,
    opt_g: Adam<f32>,
    opt_d: Adam<f32>,
    opt_s: Adam<f32>,
}

fn non_finite(step: u64, phase: &str, losses: &StepLosses) -> TrainError {
    TrainError::NonFinite(Box::new(Diagnostics { step, phase: phase.into(), losses: losses.clone() }))
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl Trainer {
    /// Wrap a bundle. `class_weights` may be empty (uniform).
    pub fn new(config: TrainConfig, bundle: ModelBundle, class_weights: Vec<f32>) -> Result<Self, TrainError> {
        config.validate()?;
        let expected = config.model_config(bundle.config.height, bundle.config.width, bundle.classes.len());
        bundle.check_compatible(&expected, &bundle.classes.clone())?;
        let state = if bundle.train_state.is_null() {
            TrainState::default()
        } else {
            serde_json::from_value(bundle.train_state.clone())
                .map_err(|e| TrainError::Config(format!("checkpoint train state: {e}")))?
        };
        let geometry = bundle.config.discriminator.patch_geometry(bundle.config.height, bundle.config.width)?;
        let cw = if config.loss.class_weights.is_empty() { class_weights } else { config.loss.class_weights.clone() };
        Ok(Self {
            head: bundle.head(),
            geometry,
            class_weights: cw,
            opt_g: config.optimizers.generator.adam(&bundle.optimizers.generator),
            opt_d: config.optimizers.discriminator.adam(&bundle.optimizers.discriminator),
            opt_s: config.optimizers.segmentation.adam(&bundle.optimizers.segmentation),
            bundle,
            config,
            state,
        })
    }

    /// The fixed mask head applied to segmentation output.
    pub fn head(&self) -> &DynamicHead {
        &self.head
    }

    /// Copy optimizer and training state into the bundle.
    pub fn sync_bundle(&mut self) {
        self.bundle.optimizers.generator = self.opt_g.state().clone();
        self.bundle.optimizers.discriminator = self.opt_d.state().clone();
        self.bundle.optimizers.segmentation = self.opt_s.state().clone();
        self.bundle.progress.epoch = self.state.epoch as u64;
        self.bundle.progress.step = self.state.step;
        self.bundle.train_state = serde_json::to_value(&self.state).expect("train state serializes");
    }

    pub fn into_bundle(mut self) -> ModelBundle {
        self.sync_bundle();
        self.bundle
    }

    fn adversarial_into_segmentation(&self) -> bool {
        self.state.epoch >= self.config.warmup_epochs
    }

    /// One update on a batch (already augmented). Paired and real samples
    /// are split into their own sub-steps.
    pub fn train_step(&mut self, batch: &[SamplePair]) -> Result<StepLosses, TrainError> {
        self.train_step_observed(batch, &mut |_, _, _| {})
    }

    /// [`Trainer::train_step`] calling `observe` before and after each
    /// phase's optimizer update.
    pub fn train_step_observed(
        &mut self,
        batch: &[SamplePair],
        observe: &mut dyn FnMut(Phase, Stage, &ModelBundle),
    ) -> Result<StepLosses, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        let paired: Vec<&SamplePair> = batch.iter().filter(|p| !p.real).collect();
        let real: Vec<&SamplePair> = batch.iter().filter(|p| p.real).collect();
        let mut losses = StepLosses { step: self.state.step, ..Default::default() };
        if !paired.is_empty() {
            self.paired_step(&paired, &mut losses, observe)?;
        }
        if !real.is_empty() {
            let mut r = StepLosses { step: self.state.step, real: true, ..Default::default() };
            self.real_step(&real, &mut r, observe)?;
            if paired.is_empty() {
                losses = r;
            } else {
                losses.generator_l1 = (losses.generator_l1 * paired.len() as f64 + r.generator_l1 * real.len() as f64)
                    / batch.len() as f64;
            }
        }
        self.state.step += 1;
        self.state.trace.push(losses.clone());
        Ok(losses)
    }

    fn paired_step(
        &mut self,
        batch: &[&SamplePair],
        losses: &mut StepLosses,
        observe: &mut dyn FnMut(Phase, Stage, &ModelBundle),
    ) -> Result<(), TrainError> {
        let step = self.state.step;
        let ab = self.config.ablation;
        let c = ab.color.channels();
        let n = batch.len();
        let xs: Vec<Image> = batch.iter().map(|p| to_color_mode(&p.dynamic_img, ab.color)).collect();
        let ys: Vec<Image> = batch.iter().map(|p| to_color_mode(&p.static_img, ab.color)).collect();
        let x = images_to_tensor::<f32>(&xs.iter().collect::<Vec<_>>());
        let y = images_to_tensor::<f32>(&ys.iter().collect::<Vec<_>>());

        // mask channel and hard masks for the patch weights
        let mut seg = None;
        let (mask_channel, hard): (Tensor<f32>, Vec<BinaryMask>) = match ab.masks {
            MaskSource::GroundTruth => {
                let m: Vec<&BinaryMask> = batch.iter().map(|p| &p.mask).collect();
                (masks_to_tensor(&m), m.into_iter().cloned().collect())
            }
            MaskSource::Segmentation => {
                let net = self.bundle.segmentation.as_ref().ok_or_else(|| {
                    TrainError::Config("segmentation masks requested but the bundle has no segmentation network".into())
                })?;
                let rgb: Vec<&Image> = batch.iter().map(|p| &p.dynamic_img).collect();
                let (logits, scache) = net.forward(&images_to_tensor(&rgb))?;
                let (soft, hcache) = self.head.forward(&logits)?;
                let (enc, scale) = self.head.encode(&soft);
                let hard = (0..n).map(|i| self.head.hard_mask(&soft, i)).collect();
                seg = Some((logits, scache, hcache, scale));
                (enc, hard)
            }
        };
        let weights = if self.config.loss.gamma != 1.0 {
            let maps = hard
                .iter()
                .map(|m| patch_weight_map(m, &self.geometry, self.config.loss.gamma))
                .collect::<Result<Vec<_>, _>>()?;
            Some(weight_tensor::<f32>(&maps))
        } else {
            None
        };

        let g_in = if ab.generator_mask { Tensor::cat_channels(&[&x, &mask_channel]) } else { x.clone() };
        let (fake, gcache) = self.bundle.generator.forward(&g_in)?;
        let d_input = |cand: &Tensor<f32>| {
            if ab.discriminator_mask {
                Tensor::cat_channels(&[&x, &mask_channel, cand])
            } else {
                Tensor::cat_channels(&[&x, cand])
            }
        };

        // discriminator
        let disc = &mut self.bundle.discriminator;
        let (real_resp, rc) = disc.forward(&d_input(&y))?;
        let (fake_resp, fc) = disc.forward(&d_input(&fake))?;
        let (d_loss, g_real, g_fake) = discriminator_loss_logits(&real_resp.logits, &fake_resp.logits, weights.as_ref());
        disc.backward(&rc, &g_real);
        disc.backward(&fc, &g_fake);
        losses.discriminator = Some(d_loss);
        let norm = disc.grad_norm();
        losses.grad_norm_discriminator = Some(norm);
        if !finite(&[d_loss, norm]) {
            return Err(non_finite(step, "discriminator", losses));
        }
        observe(Phase::Discriminator, Stage::Gradients, &self.bundle);
        self.opt_d.step(&mut self.bundle.discriminator);
        observe(Phase::Discriminator, Stage::Updated, &self.bundle);

        // generator, against the updated discriminator
        let disc = &mut self.bundle.discriminator;
        let (fake_resp, fc) = disc.forward(&d_input(&fake))?;
        let (g_adv, g_logits) = generator_adversarial_logits(&fake_resp.logits, weights.as_ref());
        let g_din = disc.backward(&fc, &g_logits);
        disc.zero_grad();
        let g_fake_adv = g_din.narrow_channels(g_din.channels() - c, c);
        let g_mask_from_d = ab.discriminator_mask.then(|| g_din.narrow_channels(c, 1));
        let (l1, mut g_l1) = l1_loss_tensor(&fake, &y, None);
        g_l1.scale(self.config.loss.lambda1 as f32);
        losses.generator_adversarial = Some(g_adv);
        losses.generator_l1 = l1;

        let seg_adv = seg.is_some() && self.adversarial_into_segmentation();
        let gen = &mut self.bundle.generator;
        let mut g_mask_from_g = None;
        if seg_adv && ab.generator_mask {
            // parameter gradients add up; the input gradient of the
            // adversarial part alone feeds the mask
            let gin = gen.backward(&gcache, &g_fake_adv);
            gen.backward(&gcache, &g_l1);
            g_mask_from_g = Some(gin.narrow_channels(c, 1));
        } else {
            let mut total = g_fake_adv;
            total.add_assign(&g_l1);
            gen.backward(&gcache, &total);
        }
        let norm = gen.grad_norm();
        losses.grad_norm_generator = norm;
        if !finite(&[g_adv, l1, norm]) {
            return Err(non_finite(step, "generator", losses));
        }
        observe(Phase::Generator, Stage::Gradients, &self.bundle);
        self.opt_g.step(&mut self.bundle.generator);
        observe(Phase::Generator, Stage::Updated, &self.bundle);

        // segmentation
        if let Some((logits, scache, hcache, scale)) = seg {
            let labels: Vec<&[u8]> = batch.iter().map(|p| p.labels.data()).collect();
            let (ce, mut g_logits) = segmentation_loss(&logits, &labels, &self.class_weights)?;
            g_logits.scale(self.config.loss.lambda2 as f32);
            losses.segmentation_ce = Some(ce);
            if seg_adv {
                let mut g_enc = Tensor::zeros([n, 1, x.height(), x.width()]);
                for g in [g_mask_from_d, g_mask_from_g].into_iter().flatten() {
                    g_enc.add_assign(&g);
                }
                g_enc.scale(scale as f32);
                g_logits.add_assign(&self.head.backward(&hcache, &g_enc));
                losses.segmentation_adversarial = Some(g_adv);
            }
            let net = self.bundle.segmentation.as_mut().expect("checked above");
            net.backward(&scache, &g_logits);
            let norm = net.grad_norm();
            losses.grad_norm_segmentation = Some(norm);
            if !finite(&[ce, norm]) {
                return Err(non_finite(step, "segmentation", losses));
            }
            observe(Phase::Segmentation, Stage::Gradients, &self.bundle);
            self.opt_s.step(self.bundle.segmentation.as_mut().expect("checked above"));
            observe(Phase::Segmentation, Stage::Updated, &self.bundle);
        }
        Ok(())
    }

    /// Unpaired real images: identity reconstruction through the generator
    /// with an all-static mask. Neither the discriminator nor segmentation
    /// is touched.
    fn real_step(
        &mut self,
        batch: &[&SamplePair],
        losses: &mut StepLosses,
        observe: &mut dyn FnMut(Phase, Stage, &ModelBundle),
    ) -> Result<(), TrainError> {
        let ab = self.config.ablation;
        let xs: Vec<Image> = batch.iter().map(|p| to_color_mode(&p.dynamic_img, ab.color)).collect();
        let x = images_to_tensor::<f32>(&xs.iter().collect::<Vec<_>>());
        let g_in = if ab.generator_mask {
            let m = Tensor::full([x.batch(), 1, x.height(), x.width()], -1.0);
            Tensor::cat_channels(&[&x, &m])
        } else {
            x.clone()
        };
        let gen = &mut self.bundle.generator;
        let (out, cache) = gen.forward(&g_in)?;
        let (l1, mut g) = l1_loss_tensor(&out, &x, None);
        g.scale(self.config.loss.lambda1 as f32);
        gen.backward(&cache, &g);
        losses.generator_l1 = l1;
        let norm = gen.grad_norm();
        losses.grad_norm_generator = norm;
        if !finite(&[l1, norm]) {
            return Err(non_finite(self.state.step, "real reconstruction", losses));
        }
        observe(Phase::Generator, Stage::Gradients, &self.bundle);
        self.opt_g.step(&mut self.bundle.generator);
        observe(Phase::Generator, Stage::Updated, &self.bundle);
        Ok(())
    }

    /// One pass over `train` in a shuffled order, with real batches
    /// interleaved at the configured ratio.
    pub fn run_epoch(&mut self, train: &[SamplePair], real: &[SamplePair]) -> Result<LossAverages, TrainError> {
        let bs = self.config.batch_size;
        let ratio = if real.is_empty() { 0.0 } else { self.config.data.real_ratio };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.bundle.rng);
        let synthetic: Vec<Vec<usize>> = if ratio >= 1.0 { Vec::new() } else { order.chunks(bs).map(<[usize]>::to_vec).collect() };
        let real_batches = if ratio >= 1.0 {
            real.len().div_ceil(bs)
        } else {
            (synthetic.len() as f64 * ratio / (1.0 - ratio)).round() as usize
        };
        // spread real batches evenly among synthetic ones
        let total = synthetic.len() + real_batches;
        let mut plan = Vec::with_capacity(total);
        let (mut s, mut r) = (0, 0);
        for k in 0..total {
            let want_real = r < real_batches && (s == synthetic.len() || (r + 1) * total <= (k + 1) * real_batches);
            plan.push(want_real);
            if want_real {
                r += 1;
            } else {
                s += 1;
            }
        }
        let start = self.state.trace.len();
        let mut synth_iter = synthetic.iter();
        for is_real in plan {
            let batch: Vec<SamplePair> = if is_real {
                (0..bs)
                    .map(|_| {
                        let i = self.bundle.rng.random_range(0..real.len());
                        let mut p = augment(&real[i], &self.config.augmentation, &mut self.bundle.rng);
                        p.real = true;
                        p
                    })
                    .collect()
            } else {
                synth_iter
                    .next()
                    .expect("plan matches batch count")
                    .iter()
                    .map(|&i| augment(&train[i], &self.config.augmentation, &mut self.bundle.rng))
                    .collect()
            };
            self.train_step(&batch)?;
            self.state.running = LossAverages::of(&self.state.trace[start..]);
        }
        Ok(LossAverages::of(&self.state.trace[start..]))
    }
}

/// Loaded splits a run trains and validates on.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub classes: ClassTable,
    pub height: usize,
    pub width: usize,
    pub train: Vec<SamplePair>,
    pub validation: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
    pub real: Vec<SamplePair>,
    pub class_frequencies: Vec<f64>,
}

impl TrainingData {
    /// Load and validate every split named in `data`.
    pub fn load(data: &DataConfig) -> Result<Self, TrainError> {
        let manifest = read_manifest(&data.root)?;
        let take = |mut v: Vec<SamplePair>, limit: Option<usize>| {
            if let Some(l) = limit {
                v.truncate(l);
            }
            v
        };
        let train = take(load_dataset(&data.root, &data.train_split, true)?, data.train_limit);
        if train.iter().any(|p| p.real) {
            return Err(TrainError::Config(format!("training split `{}` is not paired", data.train_split)));
        }
        let validation = match &data.validation_split {
            Some(s) => take(load_dataset(&data.root, s, true)?, data.validation_limit),
            None => Vec::new(),
        };
        let test = match &data.test_split {
            Some(s) if manifest.splits.contains_key(s) => load_dataset(&data.root, s, true)?,
            _ => Vec::new(),
        };
        let real = match &data.real_root {
            Some(root) if data.real_ratio > 0.0 => {
                let mut r = load_dataset(root, &data.real_split, false)?;
                r.iter_mut().for_each(|p| p.real = true);
                r
            }
            _ => Vec::new(),
        };
        let class_frequencies = manifest.split(&data.train_split)?.class_frequencies.clone();
        Ok(Self {
            classes: manifest.classes.clone(),
            height: manifest.height,
            width: manifest.width,
            train,
            validation,
            test,
            real,
            class_frequencies,
        })
    }
}

/// Structured record of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_l1_mask: Option<f64>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
    pub seconds: f64,
}

impl TrainingReport {
    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, json).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })
    }
}

/// Load the configured data and train.
pub fn fit(config: &TrainConfig) -> Result<(ModelBundle, TrainingReport), TrainError> {
    config.validate()?;
    let data = TrainingData::load(&config.data)?;
    fit_with_data(config, &data)
}

fn save(trainer: &mut Trainer, dir: &Path, name: &str) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
    trainer.sync_bundle();
    save_checkpoint(&trainer.bundle, &dir.join(name))?;
    Ok(())
}

/// Train on already loaded data, resuming from `latest` when asked.
pub fn fit_with_data(config: &TrainConfig, data: &TrainingData) -> Result<(ModelBundle, TrainingReport), TrainError> {
    config.validate()?;
    let began = Instant::now();
    let model_config = config.model_config(data.height, data.width, data.classes.len());
    let latest = config.checkpoint_dir.as_ref().map(|d| d.join(LATEST_CHECKPOINT));
    let bundle = match &latest {
        Some(path) if config.resume && path.exists() => load_checkpoint_expecting(path, &model_config, &data.classes)?,
        _ => ModelBundle::new(model_config, data.classes.clone(), config.seed)?,
    };
    let weights = if data.class_frequencies.len() == data.classes.len() {
        class_weights(&data.class_frequencies)
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(config.clone(), bundle, weights)?;
    if config.epochs > 0 && data.train.is_empty() && !(config.data.real_ratio >= 1.0 && !data.real.is_empty()) {
        return Err(TrainError::Config("training split is empty".into()));
    }

    while trainer.state.epoch < config.epochs {
        let losses = trainer.run_epoch(&data.train, &data.real)?;
        let epoch = trainer.state.epoch;
        let validation = if data.validation.is_empty() {
            None
        } else {
            let source = config.ablation.masks;
            Some(evaluate_model(&trainer.bundle, &data.validation, source, config.batch_size)?)
        };
        let metrics = validation.as_ref().map(ValidationMetrics::from);
        let mut improved = false;
        if let Some(v) = metrics.as_ref().and_then(|m| m.l1_mask) {
            if trainer.state.best_l1_mask.is_none_or(|b| v < b) {
                trainer.state.best_l1_mask = Some(v);
                trainer.state.best_epoch = Some(epoch);
                improved = true;
            }
        }
        log::info!(
            "epoch {epoch}: l1 {:.4} val l1_mask {:?}",
            losses.generator_l1.unwrap_or(f64::NAN),
            metrics.as_ref().and_then(|m| m.l1_mask)
        );
        trainer.state.epochs.push(EpochRecord { epoch, losses, validation: metrics });
        trainer.state.running = LossAverages::default();
        trainer.state.epoch += 1;
        if let Some(dir) = &config.checkpoint_dir {
            if improved {
                save(&mut trainer, dir, BEST_CHECKPOINT)?;
            }
            if trainer.state.epoch % config.checkpoint_every == 0 || trainer.state.epoch == config.epochs {
                save(&mut trainer, dir, LATEST_CHECKPOINT)?;
            }
        }
    }

    let bundle = trainer.into_bundle();
    let state: TrainState = serde_json::from_value(bundle.train_state.clone()).expect("written above");
    let report = TrainingReport {
        version: format!("stillframe {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        config_hash: config.hash(),
        dataset_hash: dataset_hash(&data.train),
        epochs: state.epochs,
        best_l1_mask: state.best_l1_mask,
        best_epoch: state.best_epoch,
        steps: state.step,
        seconds: began.elapsed().as_secs_f64(),
    };
    Ok((bundle, report))
}

/// One column of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub variant: Variant,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub columns: Vec<AblationColumn>,
}

impl AblationReport {
    pub fn column(&self, variant: Variant) -> Option<&MetricsReport> {
        self.columns.iter().find(|c| c.variant == variant).map(|c| &c.metrics)
    }

    /// Rows L1, L1_mask, L1_no_mask; one column per variant.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}", "metric (%)");
        for c in &self.columns {
            out.push_str(&format!(" {:>17}", c.variant.slug()));
        }
        out.push('\n');
        type Pick = fn(&MetricsReport) -> Option<f64>;
        let rows: [(&str, Pick); 3] =
            [("L1", |m| Some(m.l1)), ("L1_mask", |m| m.l1_mask), ("L1_no_mask", |m| m.l1_no_mask)];
        for (name, pick) in rows {
            out.push_str(&format!("{name:<12}"));
            for c in &self.columns {
                match pick(&c.metrics) {
                    Some(v) => out.push_str(&format!(" {v:>17.3}")),
                    None => out.push_str(&format!(" {:>17}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trained bundles of a grid run, in column order, with the table.
pub struct AblationRun {
    pub report: AblationReport,
    pub bundles: Vec<(Variant, ModelBundle)>,
}

/// Train every ablation variant with the same seed and score each on the
/// test split (the validation split when there is none) with ground-truth
/// masks, in the variant's own color mode. With a checkpoint directory the
/// best-validation checkpoint is scored instead of the final weights.
pub fn run_ablation_grid(base: &TrainConfig, data: &TrainingData) -> Result<AblationRun, TrainError> {
    let eval = if data.test.is_empty() { &data.validation } else { &data.test };
    if eval.is_empty() {
        return Err(TrainError::Config("ablation needs a test or validation split".into()));
    }
    let mut columns = Vec::new();
    let mut bundles = Vec::new();
    for variant in Variant::ALL {
        let cfg = base.for_variant(variant);
        let (mut bundle, _) = fit_with_data(&cfg, data)?;
        if let Some(best) = cfg.checkpoint_dir.as_ref().map(|d| d.join(BEST_CHECKPOINT)).filter(|p| p.exists()) {
            bundle = load_checkpoint(&best)?;
        }
        let metrics = evaluate_model(&bundle, eval, MaskSource::GroundTruth, cfg.batch_size)?;
        columns.push(AblationColumn { variant, metrics });
        bundles.push((variant, bundle));
    }
    Ok(AblationRun { report: AblationReport { seed: base.seed, columns }, bundles })
}
