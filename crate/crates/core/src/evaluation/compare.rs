use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imagecore::{quantize, BinaryMask, Image, ValueRange};
use crate::models::{to_color_mode, ColorMode, MaskSource, ModelBundle};
use crate::scenegen::SamplePair;

use super::{
    dataset_hash, inpaint_diffusion, inpaint_fmm, model_outputs, score_outputs, EvalError, MetricsReport,
    DEFAULT_DIFFUSION_ITERS, DEFAULT_FMM_RADIUS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareOptions {
    pub fmm_radius: f64,
    pub diffusion_iters: usize,
    pub mask_source: MaskSource,
    pub batch_size: usize,
    /// Samples shown in the qualitative grid.
    pub grid_samples: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            fmm_radius: DEFAULT_FMM_RADIUS,
            diffusion_iters: DEFAULT_DIFFUSION_ITERS,
            mask_source: MaskSource::GroundTruth,
            batch_size: 8,
            grid_samples: 6,
        }
    }
}

/// The learned model, or why it is not available.
pub enum ModelSlot<'a> {
    Loaded(&'a ModelBundle),
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub report: Option<MetricsReport>,
    /// Mean absolute error on cast-shadow pixels over samples that have any.
    pub shadow_mae: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub color: ColorMode,
    pub dataset_hash: String,
    pub samples: usize,
    pub methods: Vec<MethodOutcome>,
    /// Per grid sample: input, mask, each method that ran, target.
    #[serde(skip)]
    pub grid: Vec<Vec<Image>>,
}

impl Comparison {
    pub fn method(&self, name: &str) -> Option<&MethodOutcome> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Pixels outside the mask where the dynamic and static renders differ.
pub fn shadow_pixels(pair: &SamplePair) -> BinaryMask {
    let (d, s) = (&pair.dynamic_img, &pair.static_img);
    let p = pair.height() * pair.width();
    let data = (0..p)
        .map(|i| (pair.mask.data()[i] == 0 && (0..d.channels()).any(|c| d.plane(c)[i] != s.plane(c)[i])) as u8)
        .collect();
    BinaryMask::new(pair.height(), pair.width(), data).expect("binary by construction")
}

/// Mean absolute error of `prediction` against `target` on the pair's
/// shadow pixels; `None` when it has none.
pub fn shadow_mae(prediction: &Image, target: &Image, pair: &SamplePair) -> Option<f64> {
    let shadows = shadow_pixels(pair);
    if shadows.is_empty() {
        return None;
    }
    let p = prediction.height() * prediction.width();
    let c = prediction.channels();
    let mut sum = 0.0;
    for i in (0..p).filter(|&i| shadows.data()[i] == 1) {
        for ch in 0..c {
            sum += (prediction.plane(ch)[i] as f64 - target.plane(ch)[i] as f64).abs();
        }
    }
    Some(sum / (shadows.count() * c) as f64)
}

fn mean_shadow_mae(pairs: &[SamplePair], outputs: &[Image], color: ColorMode) -> Option<f64> {
    let vals: Vec<f64> = pairs
        .iter()
        .zip(outputs)
        .filter_map(|(p, o)| shadow_mae(o, &to_color_mode(&p.static_img, color), p))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Run every method on the same inputs and ground-truth masks. The color
/// space is the model's, or grayscale without one.
pub fn compare_methods(pairs: &[SamplePair], model: ModelSlot<'_>, opts: &CompareOptions) -> Result<Comparison, EvalError> {
    if pairs.iter().any(|p| p.real) {
        return Err(EvalError::Config("comparison needs paired samples".into()));
    }
    let color = match &model {
        ModelSlot::Loaded(b) => b.config.generator.color,
        ModelSlot::Missing(_) => ColorMode::Gray,
    };
    let inputs: Vec<Image> = pairs.iter().map(|p| to_color_mode(&p.dynamic_img, color)).collect();
    let mut runs: Vec<(String, Result<Vec<Image>, String>)> = vec![
        ("copy_input".into(), Ok(inputs.clone())),
        (
            "fmm".into(),
            Ok(inputs
                .iter()
                .zip(pairs)
                .map(|(i, p)| inpaint_fmm(i, &p.mask, opts.fmm_radius))
                .collect::<Result<_, _>>()?),
        ),
        (
            "diffusion".into(),
            Ok(inputs
                .iter()
                .zip(pairs)
                .map(|(i, p)| inpaint_diffusion(i, &p.mask, opts.diffusion_iters))
                .collect::<Result<_, _>>()?),
        ),
    ];
    runs.push((
        "model".into(),
        match model {
            ModelSlot::Loaded(b) => Ok(model_outputs(b, pairs, opts.mask_source, opts.batch_size)?),
            ModelSlot::Missing(reason) => Err(reason),
        },
    ));

    let mut methods = Vec::new();
    for (name, outputs) in &runs {
        methods.push(match outputs {
            Ok(out) => MethodOutcome {
                method: name.clone(),
                report: Some(score_outputs(name, pairs, out, color)?),
                shadow_mae: mean_shadow_mae(pairs, out, color),
                skipped: None,
            },
            Err(reason) => MethodOutcome { method: name.clone(), report: None, shadow_mae: None, skipped: Some(reason.clone()) },
        });
    }

    let grid = (0..opts.grid_samples.min(pairs.len()))
        .map(|i| {
            let mut row = vec![inputs[i].clone(), mask_image(&pairs[i].mask)];
            row.extend(runs.iter().filter_map(|(_, o)| o.as_ref().ok()).skip(1).map(|o| o[i].clone()));
            row.push(to_color_mode(&pairs[i].static_img, color));
            row
        })
        .collect();
    Ok(Comparison { color, dataset_hash: dataset_hash(pairs), samples: pairs.len(), methods, grid })
}

fn mask_image(mask: &BinaryMask) -> Image {
    let data = mask.data().iter().map(|&m| m as f32).collect();
    Image::new(mask.height(), mask.width(), 1, ValueRange::Unit, data).expect("mask forms an image")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

/// `comparison.csv`, `comparison.json` and `grid.png` under `dir`.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut csv = String::from("method,samples,l1,l1_mask,l1_no_mask,shadow_mae,skipped\n");
    for m in &cmp.methods {
        let (n, l1, lm, ln) = match &m.report {
            Some(r) => (r.samples.to_string(), format!("{:.4}", r.l1), fmt_opt(r.l1_mask), fmt_opt(r.l1_no_mask)),
            None => Default::default(),
        };
        let skipped = m.skipped.as_deref().unwrap_or("").replace([',', '\n'], " ");
        let _ = writeln!(csv, "{},{n},{l1},{lm},{ln},{},{skipped}", m.method, fmt_opt(m.shadow_mae.map(|v| 100.0 * v)));
    }
    let path = dir.join("comparison.csv");
    fs::write(&path, csv).map_err(io(&path))?;
    let path = dir.join("comparison.json");
    let json = serde_json::to_string_pretty(cmp).expect("comparison serializes");
    fs::write(&path, json).map_err(io(&path))?;
    if !cmp.grid.is_empty() {
        write_image_grid(&dir.join("grid.png"), &cmp.grid)?;
    }
    Ok(())
}

/// Tile rows of equally sized images into one RGB PNG with 2 px gutters.
pub fn write_image_grid(path: &Path, rows: &[Vec<Image>]) -> Result<(), EvalError> {
    const GAP: usize = 2;
    let first = rows.first().and_then(|r| r.first()).ok_or_else(|| EvalError::Config("empty image grid".into()))?;
    let (h, w) = (first.height(), first.width());
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (gh, gw) = (rows.len() * (h + GAP) + GAP, cols * (w + GAP) + GAP);
    let mut buf = vec![255u8; gh * gw * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.height() != h || img.width() != w {
                return Err(EvalError::Shape("grid images differ in size".into()));
            }
            let (oy, ox) = (GAP + r * (h + GAP), GAP + c * (w + GAP));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = img.get(ch.min(img.channels() - 1), y, x);
                        buf[((oy + y) * gw + ox + x) * 3 + ch] = quantize(v);
                    }
                }
            }
        }
    }
    image::save_buffer(path, &buf, gw as u32, gh as u32, image::ExtendedColorType::Rgb8)
        .map_err(|source| EvalError::Png { path: path.display().to_string(), source })
}
