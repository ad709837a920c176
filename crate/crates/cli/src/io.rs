use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stillframe::imagecore::{BinaryMask, Image};
use stillframe::models::{load_checkpoint, ModelBundle};
use stillframe::training::{BEST_CHECKPOINT, LATEST_CHECKPOINT};

use crate::config::RunConfig;
use crate::failure::Failure;

/// `<root>/{config.toml, checkpoints/, reports/, images/}`.
pub struct RunDir {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub images: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        let dir = Self {
            root: root.to_path_buf(),
            checkpoints: root.join("checkpoints"),
            reports: root.join("reports"),
            images: root.join("images"),
        };
        for d in [&dir.root, &dir.checkpoints, &dir.reports, &dir.images] {
            fs::create_dir_all(d).map_err(|e| Failure::runtime(format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(dir)
    }

    /// Write the effective configuration next to the outputs.
    pub fn echo(&self, config: &RunConfig) -> Result<(), Failure> {
        write_text(&self.root.join("config.toml"), &config.to_toml())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_text(path, &serde_json::to_string_pretty(value).expect("report serializes"))
}

/// A checkpoint file, or a directory holding `best` or else `latest`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf, Failure> {
    if path.is_dir() {
        [BEST_CHECKPOINT, LATEST_CHECKPOINT]
            .iter()
            .map(|n| path.join(n))
            .find(|p| p.is_file())
            .ok_or_else(|| Failure::data(format!("no checkpoint in {}", path.display())))
    } else if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Failure::data(format!("checkpoint {} does not exist", path.display())))
    }
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle, Failure> {
    let file = resolve_checkpoint(path)?;
    log::info!("loading {}", file.display());
    Ok(load_checkpoint(&file)?)
}

fn open(path: &Path) -> Result<image::DynamicImage, Failure> {
    image::open(path).map_err(|e| Failure::data(format!("cannot read image {}: {e}", path.display())))
}

pub fn read_rgb(path: &Path) -> Result<Image, Failure> {
    let img = open(path)?.to_rgb8();
    Image::from_u8_interleaved(img.height() as usize, img.width() as usize, 3, img.as_raw())
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// Any nonzero pixel is part of the hole.
pub fn read_mask(path: &Path) -> Result<BinaryMask, Failure> {
    let img = open(path)?.to_luma8();
    let data = img.as_raw().iter().map(|&v| (v > 0) as u8).collect();
    BinaryMask::new(img.height() as usize, img.width() as usize, data)
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn save_image(path: &Path, img: &Image) -> Result<(), Failure> {
    let color = if img.channels() == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    image::save_buffer(path, &img.to_u8_interleaved(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<(), Failure> {
    let data: Vec<u8> = mask.data().iter().map(|&m| m * 255).collect();
    image::save_buffer(path, &data, mask.width() as u32, mask.height() as u32, image::ExtendedColorType::L8)
        .map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

/// PNG files of a directory in name order, or the single file given.
pub fn png_inputs(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let entries = fs::read_dir(path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::data(format!("no PNG images in {}", path.display())));
    }
    Ok(files)
}
