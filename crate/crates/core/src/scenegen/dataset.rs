//! On-disk dataset format: `<root>/<split>/{dynamic,static,labels,mask}/<id>.png`
//! plus `manifest.json` at the root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ExtendedColorType, ImageFormat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imagecore::{mask_from_labels, BinaryMask, ClassTable, Image, ImageError, LabelMap};

use super::{render_pair, sample_scene, GenerationError, GenerationParams, SamplePair, Town};

pub const GENERATOR_VERSION: &str = "stillframe-scenegen/1";
pub const MANIFEST_FILE: &str = "manifest.json";

const KINDS: [&str; 4] = ["dynamic", "static", "labels", "mask"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot encode or decode {path}: {source}")]
    Png { path: PathBuf, source: image::ImageError },
    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("split `{0}` is not in the manifest")]
    UnknownSplit(String),
    #[error("refusing to overwrite non-empty split directory {0}")]
    Exists(PathBuf),
    #[error("sample {id}: {reason}")]
    Sample { id: String, reason: String },
    #[error(transparent)]
    Generation(#[from] GenerationError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One split of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub ids: Vec<String>,
    /// False when the split has no static images (real, unpaired data).
    pub paired: bool,
    /// Layout regime used for generated splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub town: Option<Town>,
    /// Fraction of pixels per class.
    #[serde(default)]
    pub class_frequencies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory holding the manifest. Written as `.`; replaced by the
    /// actual location on read.
    pub root: PathBuf,
    pub height: usize,
    pub width: usize,
    pub classes: ClassTable,
    pub generator_version: String,
    pub global_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<GenerationParams>,
    pub splits: BTreeMap<String, SplitManifest>,
}

impl DatasetManifest {
    pub fn split(&self, name: &str) -> Result<&SplitManifest, DatasetError> {
        self.splits.get(name).ok_or_else(|| DatasetError::UnknownSplit(name.to_string()))
    }

    pub fn write(&self) -> Result<(), DatasetError> {
        let path = self.root.join(MANIFEST_FILE);
        let mut stored = self.clone();
        stored.root = PathBuf::from(".");
        let text = serde_json::to_string_pretty(&stored).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest, DatasetError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| DatasetError::Manifest { path: path.clone(), reason: e.to_string() })?;
    manifest.classes.validate().map_err(|e| DatasetError::Manifest { path: path.clone(), reason: e.to_string() })?;
    manifest.root = root.to_path_buf();
    Ok(manifest)
}

/// Independent rng seed for one sample, so generation order does not matter.
pub fn sample_seed(global_seed: u64, split: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(split.as_bytes());
    h.update((index as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Inverse-log-frequency class weights `1 / ln(1.02 + f)`.
pub fn class_weights(frequencies: &[f64]) -> Vec<f32> {
    frequencies.iter().map(|&f| (1.0 / (1.02 + f).ln()) as f32).collect()
}

fn file_path(root: &Path, split: &str, kind: &str, id: &str) -> PathBuf {
    root.join(split).join(kind).join(format!("{id}.png"))
}

fn write_png(path: &Path, bytes: &[u8], width: usize, height: usize, color: ExtendedColorType) -> Result<(), DatasetError> {
    image::save_buffer_with_format(path, bytes, width as u32, height as u32, color, ImageFormat::Png)
        .map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })
}

fn color_type(channels: usize) -> ExtendedColorType {
    if channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    }
}

/// Write all files of one sample. The static image is skipped for real samples.
pub fn write_sample(root: &Path, split: &str, pair: &SamplePair) -> Result<(), DatasetError> {
    let (h, w) = (pair.height(), pair.width());
    for kind in KINDS {
        let dir = root.join(split).join(kind);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let img = &pair.dynamic_img;
    write_png(&file_path(root, split, "dynamic", &pair.id), &img.to_u8_interleaved(), w, h, color_type(img.channels()))?;
    if !pair.real {
        let img = &pair.static_img;
        write_png(&file_path(root, split, "static", &pair.id), &img.to_u8_interleaved(), w, h, color_type(img.channels()))?;
    }
    write_png(&file_path(root, split, "labels", &pair.id), pair.labels.data(), w, h, ExtendedColorType::L8)?;
    let mask: Vec<u8> = pair.mask.data().iter().map(|&m| m * 255).collect();
    write_png(&file_path(root, split, "mask", &pair.id), &mask, w, h, ExtendedColorType::L8)
}

/// Sample `index` of `split`, exactly as [`generate_dataset`] renders it.
pub fn render_sample(seed: u64, split: &str, index: usize, params: &GenerationParams) -> Result<SamplePair, GenerationError> {
    let params = GenerationParams { town: Town::for_split(split), ..params.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, split, index));
    let mut pair = render_pair(&sample_scene(&mut rng, &params)?);
    pair.id = format!("{index:06}");
    Ok(pair)
}

/// Render and write `count` samples per requested split, then the manifest.
/// Splits already listed in a compatible manifest under `out_root` are kept.
/// Train uses one layout regime and every other split the other.
pub fn generate_dataset(
    out_root: &Path,
    splits: &[(&str, usize)],
    seed: u64,
    params: &GenerationParams,
) -> Result<DatasetManifest, DatasetError> {
    params.validate()?;
    fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let classes = ClassTable::urban();
    let mut manifest = DatasetManifest {
        root: out_root.to_path_buf(),
        height: params.height,
        width: params.width,
        classes: classes.clone(),
        generator_version: GENERATOR_VERSION.to_string(),
        global_seed: seed,
        params: Some(params.clone()),
        splits: BTreeMap::new(),
    };
    if out_root.join(MANIFEST_FILE).exists() {
        let existing = read_manifest(out_root)?;
        let mut compare = existing.clone();
        compare.splits = BTreeMap::new();
        if compare != manifest {
            return Err(DatasetError::Manifest {
                path: out_root.join(MANIFEST_FILE),
                reason: "existing dataset was generated with different settings".into(),
            });
        }
        manifest.splits = existing.splits;
    }
    for &(split, count) in splits {
        let split_dir = out_root.join(split);
        if split_dir.exists() && fs::read_dir(&split_dir).map_err(io_err(&split_dir))?.next().is_some() {
            return Err(DatasetError::Exists(split_dir));
        }
        let town = Town::for_split(split);
        let split_params = params.clone();
        let mut histogram = vec![0u64; classes.len()];
        let mut ids = Vec::with_capacity(count);
        for index in 0..count {
            let pair = render_sample(seed, split, index, &split_params)?;
            for &l in pair.labels.data() {
                histogram[l as usize] += 1;
            }
            write_sample(out_root, split, &pair)?;
            ids.push(pair.id);
        }
        let total = histogram.iter().sum::<u64>().max(1) as f64;
        manifest.splits.insert(
            split.to_string(),
            SplitManifest {
                ids,
                paired: true,
                town: Some(town),
                class_frequencies: histogram.iter().map(|&c| c as f64 / total).collect(),
            },
        );
        log::info!("generated {count} samples for split {split}");
    }
    manifest.write()?;
    Ok(manifest)
}

fn read_png(path: &Path, id: &str) -> Result<image::DynamicImage, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::Sample {
        id: id.to_string(),
        reason: format!("cannot read {}: {e}", path.display()),
    })?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|source| DatasetError::Png { path: path.to_path_buf(), source })
}

fn sample_err(id: &str) -> impl Fn(ImageError) -> DatasetError + '_ {
    move |e| DatasetError::Sample { id: id.to_string(), reason: e.to_string() }
}

fn read_rgb(path: &Path, id: &str, h: usize, w: usize) -> Result<Image, DatasetError> {
    let img = read_png(path, id)?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(DatasetError::Sample {
            id: id.to_string(),
            reason: format!("{} is {}x{}, expected {h}x{w}", path.display(), img.height(), img.width()),
        });
    }
    Image::from_u8_interleaved(h, w, 3, img.to_rgb8().as_raw()).map_err(sample_err(id))
}

fn read_gray(path: &Path, id: &str, h: usize, w: usize) -> Result<Vec<u8>, DatasetError> {
    let img = read_png(path, id)?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(DatasetError::Sample {
            id: id.to_string(),
            reason: format!("{} is {}x{}, expected {h}x{w}", path.display(), img.height(), img.width()),
        });
    }
    Ok(img.to_luma8().into_raw())
}

/// Load one sample. With `validate`, the mask must equal the label-derived
/// dynamic membership.
pub fn load_sample(
    manifest: &DatasetManifest,
    split: &str,
    id: &str,
    validate: bool,
) -> Result<SamplePair, DatasetError> {
    let entry = manifest.split(split)?;
    let (root, h, w) = (&manifest.root, manifest.height, manifest.width);
    let dynamic_img = read_rgb(&file_path(root, split, "dynamic", id), id, h, w)?;
    let static_img = if entry.paired {
        read_rgb(&file_path(root, split, "static", id), id, h, w)?
    } else {
        dynamic_img.clone()
    };
    let labels = read_gray(&file_path(root, split, "labels", id), id, h, w)?;
    let labels = LabelMap::new(h, w, labels, Arc::new(manifest.classes.clone())).map_err(sample_err(id))?;
    let raw_mask = read_gray(&file_path(root, split, "mask", id), id, h, w)?;
    let mut mask_data = Vec::with_capacity(raw_mask.len());
    for (i, v) in raw_mask.into_iter().enumerate() {
        mask_data.push(match v {
            0 => 0,
            1 | 255 => 1,
            other => {
                return Err(DatasetError::Sample {
                    id: id.to_string(),
                    reason: format!("mask value {other} at pixel {i} is not binary"),
                })
            }
        });
    }
    let mask = BinaryMask::new(h, w, mask_data).map_err(sample_err(id))?;
    if validate {
        if mask != mask_from_labels(&labels) {
            return Err(DatasetError::Sample {
                id: id.to_string(),
                reason: "mask disagrees with the dynamic classes of the label map".into(),
            });
        }
        if entry.paired {
            let p = h * w;
            let body_unchanged = (0..p).any(|i| {
                mask.data()[i] == 1 && (0..3).all(|c| dynamic_img.plane(c)[i] == static_img.plane(c)[i])
            });
            if body_unchanged && manifest.generator_version == GENERATOR_VERSION {
                return Err(DatasetError::Sample {
                    id: id.to_string(),
                    reason: "masked pixel identical in dynamic and static images".into(),
                });
            }
        }
    }
    Ok(SamplePair { id: id.to_string(), dynamic_img, static_img, labels, mask, real: !entry.paired })
}

/// Load every sample of a split in manifest order.
pub fn load_dataset(root: &Path, split: &str, validate: bool) -> Result<Vec<SamplePair>, DatasetError> {
    let manifest = read_manifest(root)?;
    let entry = manifest.split(split)?;
    entry.ids.iter().map(|id| load_sample(&manifest, split, id, validate)).collect()
}

/// Register an externally prepared split (same directory layout) in the
/// manifest, creating the manifest if needed. A missing `static/` directory
/// marks the split as unpaired.
pub fn index_external_split(root: &Path, split: &str, classes: &ClassTable) -> Result<DatasetManifest, DatasetError> {
    classes
        .validate()
        .map_err(|e| DatasetError::Manifest { path: root.join(MANIFEST_FILE), reason: e.to_string() })?;
    let dyn_dir = root.join(split).join("dynamic");
    let mut ids: Vec<String> = fs::read_dir(&dyn_dir)
        .map_err(io_err(&dyn_dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let path = e.path();
            (path.extension()? == "png").then(|| path.file_stem()?.to_str().map(str::to_string)).flatten()
        })
        .collect();
    ids.sort();
    let first = ids.first().ok_or_else(|| DatasetError::Manifest {
        path: dyn_dir.clone(),
        reason: "no png files".into(),
    })?;
    let probe = read_png(&file_path(root, split, "dynamic", first), first)?;
    let (h, w) = (probe.height() as usize, probe.width() as usize);
    let paired = root.join(split).join("static").is_dir();

    let mut manifest = if root.join(MANIFEST_FILE).exists() {
        let m = read_manifest(root)?;
        if (m.height, m.width) != (h, w) || &m.classes != classes {
            return Err(DatasetError::Manifest {
                path: root.join(MANIFEST_FILE),
                reason: format!("split {split} disagrees with existing size or class table"),
            });
        }
        m
    } else {
        DatasetManifest {
            root: root.to_path_buf(),
            height: h,
            width: w,
            classes: classes.clone(),
            generator_version: "external".into(),
            global_seed: 0,
            params: None,
            splits: BTreeMap::new(),
        }
    };
    manifest.splits.insert(split.to_string(), SplitManifest { ids, paired, town: None, class_frequencies: Vec::new() });
    let mut histogram = vec![0u64; classes.len()];
    for id in &manifest.splits[split].ids {
        let s = load_sample(&manifest, split, id, false)?;
        for &l in s.labels.data() {
            histogram[l as usize] += 1;
        }
    }
    let total = histogram.iter().sum::<u64>().max(1) as f64;
    manifest.splits.get_mut(split).expect("inserted").class_frequencies =
        histogram.iter().map(|&c| c as f64 / total).collect();
    manifest.write()?;
    Ok(manifest)
}
