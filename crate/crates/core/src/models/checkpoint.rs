//! Single-file checkpoints in the safetensors container. Parameters and
//! optimizer moments are `F32` tensors; one JSON header in the metadata
//! carries the format version, architecture, class table, progress, rng and
//! training state.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stillframe_nn::{AdamState, Param, Parameters};

use crate::imagecore::ClassTable;

use super::{Discriminator, DynamicHead, Generator, ModelConfig, ModelError, SegmentationNet};

pub const CHECKPOINT_FORMAT: &str = "stillframe-checkpoint/2";

/// Training position stored with the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerStates {
    pub generator: AdamState<f32>,
    pub discriminator: AdamState<f32>,
    pub segmentation: AdamState<f32>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub classes: ClassTable,
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub segmentation: Option<SegmentationNet<f32>>,
    pub optimizers: OptimizerStates,
    pub progress: Progress,
    pub rng: ChaCha8Rng,
    /// Free-form training bookkeeping (histories, best scores).
    pub train_state: serde_json::Value,
}

impl ModelBundle {
    /// Fresh networks initialized from `seed`.
    pub fn new(config: ModelConfig, classes: ClassTable, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        classes.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        if let Some(s) = &config.segmentation {
            if s.classes != classes.len() {
                return Err(ModelError::Config(format!(
                    "segmentation has {} classes, class table has {}",
                    s.classes,
                    classes.len()
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(config.generator.clone(), &mut rng);
        let discriminator = Discriminator::new(config.discriminator.clone(), &mut rng);
        let segmentation = config.segmentation.clone().map(|c| SegmentationNet::new(c, &mut rng));
        Ok(Self {
            config,
            classes,
            generator,
            discriminator,
            segmentation,
            optimizers: OptimizerStates::default(),
            progress: Progress::default(),
            rng,
            train_state: serde_json::Value::Null,
        })
    }

    pub fn head(&self) -> DynamicHead {
        DynamicHead::new(&self.classes).expect("class table validated on construction")
    }

    /// Hex SHA-256 of the canonical architecture JSON.
    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    /// Error unless the bundle was built for this architecture and class table.
    pub fn check_compatible(&self, config: &ModelConfig, classes: &ClassTable) -> Result<(), ModelError> {
        if &self.classes != classes {
            return Err(ModelError::Config(format!(
                "checkpoint has {} classes, expected {}",
                self.classes.len(),
                classes.len()
            )));
        }
        if &self.config != config {
            return Err(ModelError::Config(format!(
                "architecture mismatch: checkpoint {} vs expected {}",
                serde_json::to_string(&self.config).unwrap_or_default(),
                serde_json::to_string(config).unwrap_or_default()
            )));
        }
        Ok(())
    }
}

pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

fn collect_params(model: &dyn Parameters<f32>, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
    model.visit(&mut |p: &Param<f32>| out.push((p.name.clone(), p.shape.clone(), to_bytes(&p.value))));
}

fn collect_adam(tag: &str, state: &AdamState<f32>, out: &mut Vec<(String, Vec<usize>, Vec<u8>)>) {
    for (i, m) in state.first.iter().enumerate() {
        out.push((format!("adam.{tag}.first.{i:03}"), vec![m.len()], to_bytes(m)));
    }
    for (i, v) in state.second.iter().enumerate() {
        out.push((format!("adam.{tag}.second.{i:03}"), vec![v.len()], to_bytes(v)));
    }
}

const HEADER_KEY: &str = "stillframe";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: String,
    config: ModelConfig,
    config_hash: String,
    classes: ClassTable,
    progress: Progress,
    rng: ChaCha8Rng,
    train_state: serde_json::Value,
    optimizers: [AdamHeader; 3],
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    step: u64,
    slots: usize,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.display().to_string(), reason: reason.into() }
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<(), ModelError> {
    let mut blobs = Vec::new();
    collect_params(&bundle.generator, &mut blobs);
    collect_params(&bundle.discriminator, &mut blobs);
    if let Some(s) = &bundle.segmentation {
        collect_params(s, &mut blobs);
    }
    let opt = &bundle.optimizers;
    collect_adam("gen", &opt.generator, &mut blobs);
    collect_adam("disc", &opt.discriminator, &mut blobs);
    collect_adam("seg", &opt.segmentation, &mut blobs);

    let adam_header = |s: &AdamState<f32>| AdamHeader { step: s.step, slots: s.first.len() };
    let header = Header {
        format_version: CHECKPOINT_FORMAT.to_string(),
        config: bundle.config.clone(),
        config_hash: bundle.config_hash(),
        classes: bundle.classes.clone(),
        progress: bundle.progress,
        rng: bundle.rng.clone(),
        train_state: bundle.train_state.clone(),
        optimizers: [adam_header(&opt.generator), adam_header(&opt.discriminator), adam_header(&opt.segmentation)],
    };
    // one key keeps the header bytes independent of map ordering
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&header).expect("header serializes"))]);

    let views: Vec<(String, TensorView<'_>)> = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes).expect("byte length matches shape");
            (name.clone(), view)
        })
        .collect();
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ModelError::Io { path: dir.display().to_string(), source })?;
    }
    fs::write(path, bytes).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

fn restore_params(model: &mut dyn Parameters<f32>, st: &SafeTensors<'_>, path: &Path) -> Result<(), ModelError> {
    let mut err = None;
    model.visit_mut(&mut |p: &mut Param<f32>| {
        if err.is_some() {
            return;
        }
        match st.tensor(&p.name) {
            Ok(view) if view.dtype() == Dtype::F32 && view.shape() == p.shape.as_slice() => {
                p.value = from_bytes(view.data());
            }
            Ok(view) => {
                err = Some(ckpt_err(
                    path,
                    format!("parameter {} has shape {:?}, expected {:?}", p.name, view.shape(), p.shape),
                ))
            }
            Err(_) => err = Some(ckpt_err(path, format!("parameter {} missing", p.name))),
        }
    });
    err.map_or(Ok(()), Err)
}

fn restore_adam(tag: &str, header: &AdamHeader, st: &SafeTensors<'_>, path: &Path) -> Result<AdamState<f32>, ModelError> {
    let read = |kind: &str, i: usize| -> Result<Vec<f32>, ModelError> {
        let name = format!("adam.{tag}.{kind}.{i:03}");
        let view = st.tensor(&name).map_err(|_| ckpt_err(path, format!("optimizer slot {name} missing")))?;
        Ok(from_bytes(view.data()))
    };
    let mut state = AdamState { step: header.step, first: Vec::new(), second: Vec::new() };
    for i in 0..header.slots {
        state.first.push(read("first", i)?);
        state.second.push(read("second", i)?);
    }
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle, ModelError> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let raw = metadata
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| ckpt_err(path, "no stillframe header"))?;
    let version = serde_json::from_str::<serde_json::Value>(raw)
        .ok()
        .and_then(|v| v.get("format_version").and_then(|f| f.as_str()).map(str::to_string))
        .unwrap_or_default();
    if version != CHECKPOINT_FORMAT {
        return Err(ckpt_err(path, format!("unsupported format `{version}`")));
    }
    let header: Header = serde_json::from_str(raw).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    let Header { config, config_hash: hash, classes, progress, rng, train_state, optimizers: headers, .. } = header;
    if hash != config_hash(&config) {
        return Err(ckpt_err(path, "config hash does not match stored architecture"));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let mut bundle = ModelBundle::new(config, classes, 0).map_err(|e| ckpt_err(path, e.to_string()))?;
    restore_params(&mut bundle.generator, &st, path)?;
    restore_params(&mut bundle.discriminator, &st, path)?;
    if let Some(s) = &mut bundle.segmentation {
        restore_params(s, &st, path)?;
    }
    bundle.optimizers = OptimizerStates {
        generator: restore_adam("gen", &headers[0], &st, path)?,
        discriminator: restore_adam("disc", &headers[1], &st, path)?,
        segmentation: restore_adam("seg", &headers[2], &st, path)?,
    };
    bundle.progress = progress;
    bundle.rng = rng;
    bundle.train_state = train_state;
    Ok(bundle)
}

/// Load and insist on a particular architecture and class table.
pub fn load_checkpoint_expecting(path: &Path, config: &ModelConfig, classes: &ClassTable) -> Result<ModelBundle, ModelError> {
    let bundle = load_checkpoint(path)?;
    bundle.check_compatible(config, classes).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ColorMode, DiscriminatorConfig, GeneratorConfig, SegmentationConfig};
    use rand::Rng;
    use stillframe_nn::{Adam, Tensor};

    fn small_config() -> ModelConfig {
        ModelConfig {
            height: 16,
            width: 16,
            generator: GeneratorConfig { depth: 3, base_width: 2, use_mask: true, color: ColorMode::Gray },
            discriminator: DiscriminatorConfig { base_width: 2, n_down: 1, use_mask: true, color: ColorMode::Gray },
            segmentation: Some(SegmentationConfig { width: 2, blocks: 1, ..Default::default() }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut b = ModelBundle::new(small_config(), ClassTable::urban(), 3).unwrap();
        // give the optimizer some state
        b.generator.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.01));
        let mut adam = Adam::<f32>::new(2e-4, 0.5, 0.999);
        adam.step(&mut b.generator);
        b.optimizers.generator = adam.state().clone();
        b.progress = Progress { epoch: 2, step: 17 };
        let _: u64 = b.rng.random();
        b.train_state = serde_json::json!({"best": 0.5});

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt/model.safetensors");
        save_checkpoint(&b, &path).unwrap();
        let mut l = load_checkpoint(&path).unwrap();

        let x = Tensor::from_vec([1, 2, 16, 16], (0..512).map(|i| ((i % 13) as f32 / 6.5) - 1.0).collect());
        assert_eq!(b.generator.forward(&x).unwrap().0, l.generator.forward(&x).unwrap().0);
        assert_eq!(b.optimizers, l.optimizers);
        assert_eq!(b.progress, l.progress);
        assert_eq!(b.train_state, l.train_state);
        assert_eq!(b.rng.random::<u64>(), l.rng.random::<u64>());
        let names = |m: &dyn Parameters<f32>| {
            let mut v = Vec::new();
            m.visit(&mut |p| v.push(p.value.clone()));
            v
        };
        assert_eq!(names(b.segmentation.as_ref().unwrap()), names(l.segmentation.as_ref().unwrap()));
        assert_eq!(names(&b.discriminator), names(&l.discriminator));
    }

    #[test]
    fn wrong_class_count_is_rejected() {
        let b = ModelBundle::new(small_config(), ClassTable::urban(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        save_checkpoint(&b, &path).unwrap();
        let other = ClassTable::from_names(&[("a", false), ("b", false), ("c", false), ("d", true), ("e", true)]).unwrap();
        let mut cfg = small_config();
        cfg.segmentation.as_mut().unwrap().classes = 5;
        assert!(load_checkpoint_expecting(&path, &cfg, &other).is_err());
        assert!(load_checkpoint_expecting(&path, &small_config(), &ClassTable::urban()).is_ok());
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.safetensors");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
