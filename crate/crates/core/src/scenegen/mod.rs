//! Procedural paired scene generation.
//!
//! A scene is a flat 2-D street: sky, a row of facades with window grids, a
//! sidewalk band and a road with a depth gradient and lane dashes. Vehicles
//! and pedestrians stand on the ground and optionally cast a sheared
//! shadow. Rendering the same [`SceneSpec`] twice is bit-identical, and the
//! static image is the same render with objects and shadows left out.

mod dataset;
mod render;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{BinaryMask, Image, LabelMap};

pub use dataset::{
    class_weights, generate_dataset, index_external_split, load_dataset, load_sample, read_manifest,
    render_sample, sample_seed, write_sample, DatasetError, DatasetManifest, SplitManifest, GENERATOR_VERSION, MANIFEST_FILE,
};
pub use render::{render_pair, render_shadow_mask, render_static};

pub type Rgb = [f32; 3];

/// Co-registered training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// Scene with objects and their shadows.
    pub dynamic_img: Image,
    /// Same scene, same pose and illumination, no objects or shadows.
    /// Equal to `dynamic_img` for unpaired (real) samples.
    pub static_img: Image,
    /// Labels of the dynamic image.
    pub labels: LabelMap,
    /// Dynamic-object pixels only. Shadows are never part of the mask.
    pub mask: BinaryMask,
    /// True for unpaired samples without a static ground truth.
    pub real: bool,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.dynamic_img.height()
    }

    pub fn width(&self) -> usize {
        self.dynamic_img.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    Vehicle,
    Pedestrian,
}

impl ObjectKind {
    pub fn class_index(self) -> u8 {
        match self {
            ObjectKind::Vehicle => crate::imagecore::ClassTable::VEHICLE,
            ObjectKind::Pedestrian => crate::imagecore::ClassTable::PEDESTRIAN,
        }
    }
}

/// One vehicle or pedestrian. Coordinates are fractions of the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicObjectSpec {
    pub kind: ObjectKind,
    /// Horizontal center.
    pub center_x: f32,
    /// Row of the ground contact line.
    pub base_y: f32,
    pub width: f32,
    pub height: f32,
    pub color: Rgb,
    pub texture_seed: u64,
    pub casts_shadow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub cols: u32,
    pub rows: u32,
    pub color: Rgb,
    /// Fraction of each cell taken by the window pane.
    pub fill: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub x0: f32,
    pub x1: f32,
    pub top: f32,
    pub facade: Rgb,
    pub windows: Option<WindowGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneMarking {
    /// Center row of the dashes.
    pub y: f32,
    pub thickness: f32,
    pub dash: f32,
    pub gap: f32,
    pub offset: f32,
    pub color: Rgb,
}

/// Static part of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Row where facades meet the sidewalk.
    pub horizon: f32,
    /// Row where the sidewalk meets the road.
    pub road_top: f32,
    pub sky_top: Rgb,
    pub sky_bottom: Rgb,
    pub sidewalk: Rgb,
    pub road_far: Rgb,
    pub road_near: Rgb,
    pub buildings: Vec<Building>,
    pub lane: Option<LaneMarking>,
}

/// Light direction in the image plane and shadow strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sun {
    /// Unit vector along which shadows are cast; the vertical part points down.
    pub direction: (f32, f32),
    /// Shadow length per unit of object height.
    pub length: f32,
    /// Shadowed pixels are multiplied by `1 - opacity`.
    pub opacity: f32,
}

/// Everything needed to render one [`SamplePair`] deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub objects: Vec<DynamicObjectSpec>,
    pub sun: Sun,
}

/// Layout regime. Train and held-out splits come from different towns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Town {
    A,
    B,
}

impl Town {
    pub fn for_split(split: &str) -> Self {
        if split == "train" {
            Town::A
        } else {
            Town::B
        }
    }
}

impl fmt::Display for Town {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Town::A => write!(f, "a"),
            Town::B => write!(f, "b"),
        }
    }
}

/// Ranges scene parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub height: usize,
    pub width: usize,
    pub object_count: (usize, usize),
    pub pedestrian_fraction: f32,
    /// Vehicle width as a fraction of frame width.
    pub vehicle_width: (f32, f32),
    /// Pedestrian height as a fraction of frame height.
    pub pedestrian_height: (f32, f32),
    pub shadow_probability: f32,
    pub shadow_opacity: (f32, f32),
    pub town: Town,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            object_count: (1, 4),
            pedestrian_fraction: 0.35,
            vehicle_width: (0.18, 0.34),
            pedestrian_height: (0.14, 0.24),
            shadow_probability: 0.8,
            shadow_opacity: (0.2, 0.5),
            town: Town::A,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GenerationError {
    #[error("range `{name}` = [{lo}, {hi}] is invalid: {reason}")]
    Range { name: &'static str, lo: f64, hi: f64, reason: &'static str },
    #[error("image size {0}x{1} is too small (minimum 16x16)")]
    Size(usize, usize),
}

impl GenerationParams {
    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.height < 16 || self.width < 16 {
            return Err(GenerationError::Size(self.height, self.width));
        }
        let (cmin, cmax) = self.object_count;
        if cmin > cmax {
            return Err(GenerationError::Range {
                name: "object_count",
                lo: cmin as f64,
                hi: cmax as f64,
                reason: "lower bound exceeds upper bound",
            });
        }
        let unit_checks: [(&'static str, (f32, f32), f32); 4] = [
            ("vehicle_width", self.vehicle_width, 1.0),
            ("pedestrian_height", self.pedestrian_height, 0.45),
            ("shadow_opacity", self.shadow_opacity, 1.0),
            ("pedestrian_fraction", (self.pedestrian_fraction, self.pedestrian_fraction), 1.0),
        ];
        for (name, (lo, hi), max) in unit_checks {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(GenerationError::Range { name, lo: lo as f64, hi: hi as f64, reason: "lower bound exceeds upper bound" });
            }
            if lo < 0.0 || hi > max {
                return Err(GenerationError::Range {
                    name,
                    lo: lo as f64,
                    hi: hi as f64,
                    reason: "object or value does not fit in the frame",
                });
            }
        }
        if self.vehicle_width.0 * self.width as f32 <= 2.0 {
            return Err(GenerationError::Range {
                name: "vehicle_width",
                lo: self.vehicle_width.0 as f64,
                hi: self.vehicle_width.1 as f64,
                reason: "vehicles narrower than two pixels",
            });
        }
        if !(0.0..=1.0).contains(&self.shadow_probability) {
            return Err(GenerationError::Range {
                name: "shadow_probability",
                lo: self.shadow_probability as f64,
                hi: self.shadow_probability as f64,
                reason: "probability outside [0, 1]",
            });
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    let u: f64 = rng.random();
    (lo as f64 + u * (hi - lo) as f64) as f32
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, base: Rgb, amount: f32) -> Rgb {
    let shift = uniform(rng, (-amount, amount));
    let mut out = base;
    for c in &mut out {
        *c = (*c + shift + uniform(rng, (-amount * 0.3, amount * 0.3))).clamp(0.0, 1.0);
    }
    out
}

fn gray(v: f32) -> Rgb {
    [v, v, v]
}

/// Draw a static layout for the given town.
pub fn sample_layout<R: Rng + ?Sized>(rng: &mut R, town: Town) -> Layout {
    let horizon = uniform(rng, (0.42, 0.52));
    let road_top = horizon + uniform(rng, (0.08, 0.14));
    let sky_top = jitter(rng, [0.55, 0.7, 0.92], 0.08);
    let sky_bottom = jitter(rng, [0.78, 0.85, 0.95], 0.05);
    let sidewalk = jitter(rng, gray(0.62), 0.06);
    let road_far = jitter(rng, gray(0.46), 0.05);
    let road_near = jitter(rng, gray(0.32), 0.04);

    let (count_range, win_cols, palette): ((u32, u32), (u32, u32), [Rgb; 4]) = match town {
        Town::A => ((2, 4), (2, 4), [[0.72, 0.55, 0.45], [0.6, 0.6, 0.62], [0.82, 0.76, 0.62], [0.5, 0.42, 0.4]]),
        Town::B => ((3, 5), (2, 5), [[0.66, 0.6, 0.5], [0.55, 0.58, 0.66], [0.78, 0.7, 0.68], [0.46, 0.48, 0.44]]),
    };
    let n_buildings = rng.random_range(count_range.0..=count_range.1);
    // split the full width into contiguous facades with small gaps
    let mut cuts: Vec<f32> = (0..n_buildings - 1).map(|_| uniform(rng, (0.1, 0.9))).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut edges = vec![0.0];
    edges.extend(cuts);
    edges.push(1.0);
    let mut buildings = Vec::new();
    for w in edges.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        if x1 - x0 < 0.08 {
            continue;
        }
        let gap = uniform(rng, (0.0, 0.03));
        let top = uniform(rng, (0.06, horizon - 0.12));
        let pick = rng.random_range(0..palette.len());
        let facade = jitter(rng, palette[pick], 0.06);
        let windows = (rng.random::<f32>() < 0.85).then(|| {
            let dark = rng.random::<bool>();
            WindowGrid {
                cols: rng.random_range(win_cols.0..=win_cols.1),
                rows: rng.random_range(2..=4),
                color: if dark { jitter(rng, gray(0.25), 0.05) } else { jitter(rng, [0.85, 0.9, 0.95], 0.05) },
                fill: uniform(rng, (0.45, 0.65)),
            }
        });
        buildings.push(Building { x0: x0 + gap, x1: x1 - gap, top, facade, windows });
    }
    let lane = (rng.random::<f32>() < 0.8).then(|| LaneMarking {
        y: uniform(rng, (road_top + 0.12, 0.85)),
        thickness: uniform(rng, (0.02, 0.035)),
        dash: uniform(rng, (0.08, 0.16)),
        gap: uniform(rng, (0.06, 0.12)),
        offset: uniform(rng, (0.0, 0.2)),
        color: jitter(rng, gray(0.9), 0.04),
    });
    Layout { horizon, road_top, sky_top, sky_bottom, sidewalk, road_far, road_near, buildings, lane }
}

/// Draw a set of dynamic objects standing on the layout's ground.
pub fn sample_objects<R: Rng + ?Sized>(
    rng: &mut R,
    layout: &Layout,
    params: &GenerationParams,
) -> Vec<DynamicObjectSpec> {
    let count = rng.random_range(params.object_count.0..=params.object_count.1);
    let aspect = params.height as f32 / params.width as f32;
    let mut objects: Vec<DynamicObjectSpec> = (0..count)
        .map(|_| {
            let pedestrian = rng.random::<f32>() < params.pedestrian_fraction;
            let casts_shadow = rng.random::<f32>() < params.shadow_probability;
            let texture_seed = rng.random::<u64>();
            if pedestrian {
                let height = uniform(rng, params.pedestrian_height);
                let width = height * uniform(rng, (0.35, 0.5)) * aspect;
                let base_y = uniform(rng, (layout.horizon + 0.04, 0.97));
                let center_x = uniform(rng, (0.0, 1.0));
                let color = jitter(rng, [0.35, 0.3, 0.5], 0.2);
                DynamicObjectSpec { kind: ObjectKind::Pedestrian, center_x, base_y, width, height, color, texture_seed, casts_shadow }
            } else {
                let width = uniform(rng, params.vehicle_width);
                let height = width * uniform(rng, (0.5, 0.7)) / aspect;
                let base_y = uniform(rng, (layout.road_top + 0.08, 0.98));
                let center_x = uniform(rng, (0.0, 1.0));
                let palette = [[0.8, 0.15, 0.12], [0.15, 0.3, 0.75], [0.9, 0.85, 0.2], [0.1, 0.1, 0.12], [0.85, 0.85, 0.88]];
                let pick = rng.random_range(0..palette.len());
                let color = jitter(rng, palette[pick], 0.08);
                DynamicObjectSpec { kind: ObjectKind::Vehicle, center_x, base_y, width, height, color, texture_seed, casts_shadow }
            }
        })
        .collect();
    // painter's order: farther (higher base) first
    objects.sort_by(|a, b| a.base_y.partial_cmp(&b.base_y).unwrap());
    objects
}

pub fn sample_sun<R: Rng + ?Sized>(rng: &mut R, params: &GenerationParams) -> Sun {
    let dx = uniform(rng, (-0.9, 0.9));
    let dy = uniform(rng, (0.35, 0.8));
    let norm = (dx * dx + dy * dy).sqrt();
    Sun {
        direction: (dx / norm, dy / norm),
        length: uniform(rng, (0.45, 0.8)),
        opacity: uniform(rng, params.shadow_opacity),
    }
}

/// Draw a full scene. Deterministic given the rng state.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, params: &GenerationParams) -> Result<SceneSpec, GenerationError> {
    params.validate()?;
    let seed = rng.random::<u64>();
    let layout = sample_layout(rng, params.town);
    let objects = sample_objects(rng, &layout, params);
    let sun = sample_sun(rng, params);
    Ok(SceneSpec { seed, height: params.height, width: params.width, layout, objects, sun })
}
