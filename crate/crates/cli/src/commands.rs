use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use stillframe::evaluation::{
    compare_methods, compute_metrics, evaluate_model, pilot_scenes, pilot_with_model, write_comparison, write_image_grid,
    ModelSlot,
};
use stillframe::models::{masks_to_tensor, save_checkpoint, to_color_mode, ModelBundle};
use stillframe::scenegen::{generate_dataset, load_dataset, read_manifest, render_sample, GenerationParams};
use stillframe::training::{fit, run_ablation_grid, TrainingData, LATEST_CHECKPOINT};

use crate::config::{apply_override, RunConfig};
use crate::failure::Failure;
use crate::io::{self, RunDir};
use crate::{Command, RunArgs};

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { out, n, seed, size, splits, params, overrides } => {
            generate(&out, n, seed, &size, &splits, params.as_deref(), &overrides)
        }
        Command::Train { run } => train(&run),
        Command::Infer { checkpoint, input, mask, out, batch_size } => {
            infer(&checkpoint, &input, mask.as_deref(), &out, batch_size)
        }
        Command::Eval { checkpoint, data, split, run } => eval(&checkpoint, &data, split, &run),
        Command::Ablate { run } => ablate(&run),
        Command::Compare { checkpoint, data, split, run } => compare(checkpoint.as_deref(), &data, split, &run),
        Command::Pilot { checkpoint, data, run } => pilot(&checkpoint, data.as_deref(), &run),
        Command::Bench { checkpoint, data, run } => bench(&checkpoint, data.as_deref(), &run),
    }
}

/// Load the run configuration and prepare its output directory.
fn prepare(run: &RunArgs) -> Result<(RunConfig, RunDir), Failure> {
    let config = RunConfig::load(run.config.as_deref(), &run.overrides)?;
    let root = run.out.clone().unwrap_or_else(|| config.run_dir());
    let dir = RunDir::create(&root)?;
    Ok((config, dir))
}

fn parse_size(size: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::config(format!("size `{size}` is not S or HxW"));
    match size.split_once(['x', 'X']) {
        Some((h, w)) => Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?)),
        None => {
            let s = size.trim().parse().map_err(|_| bad())?;
            Ok((s, s))
        }
    }
}

fn generation_params(file: Option<&Path>, overrides: &[String]) -> Result<GenerationParams, Failure> {
    let mut table = toml::Table::try_from(GenerationParams::default()).expect("params serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let file: toml::Table = toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        table.extend(file);
    }
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::config(e.message().to_string()))
}

fn generate(
    out: &Path,
    n: usize,
    seed: u64,
    size: &str,
    splits: &[String],
    params_file: Option<&Path>,
    overrides: &[String],
) -> Result<(), Failure> {
    let (h, w) = parse_size(size)?;
    let params = generation_params(params_file, overrides)?.with_size(h, w);
    params.validate()?;
    let names: Vec<&str> = if splits.is_empty() { vec!["train"] } else { splits.iter().map(String::as_str).collect() };
    let requests: Vec<(&str, usize)> = names.iter().map(|&s| (s, n)).collect();
    let manifest = generate_dataset(out, &requests, seed, &params)?;
    println!("dataset {} ({}x{}, seed {seed})", out.display(), manifest.height, manifest.width);
    for (name, split) in &manifest.splits {
        let dynamic: f64 = manifest
            .classes
            .dynamic_flags()
            .iter()
            .zip(&split.class_frequencies)
            .filter(|(d, _)| **d)
            .map(|(_, f)| f)
            .sum();
        let town = split.town.map_or_else(|| "-".to_string(), |t| t.to_string());
        println!("  {name}: {} samples, town {town}, dynamic pixel fraction {dynamic:.3}", split.ids.len());
    }
    Ok(())
}

fn train(run: &RunArgs) -> Result<(), Failure> {
    let (mut config, dir) = prepare(run)?;
    dir.echo(&config)?;
    if config.train.checkpoint_dir.is_none() {
        config.train.checkpoint_dir = Some(dir.checkpoints.clone());
    }
    let (bundle, report) = fit(&config.train)?;
    let ckpt_dir = config.train.checkpoint_dir.as_ref().expect("set above");
    std::fs::create_dir_all(ckpt_dir).map_err(|e| Failure::runtime(format!("{}: {e}", ckpt_dir.display())))?;
    save_checkpoint(&bundle, &ckpt_dir.join(LATEST_CHECKPOINT))?;
    report.write(&dir.reports.join("training.json"))?;
    println!("trained {} epochs ({} steps) in {:.1}s", report.epochs.len(), report.steps, report.seconds);
    if let (Some(best), Some(epoch)) = (report.best_l1_mask, report.best_epoch) {
        println!("best validation L1_mask {best:.3}% at epoch {epoch}");
    }
    println!("checkpoints in {}", ckpt_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct InferEntry {
    input: PathBuf,
    output: PathBuf,
    masked_pixels: usize,
    /// Percent L1 between output and input over the whole image.
    l1_to_input: f64,
    /// Same, outside the hole.
    l1_to_input_outside_mask: Option<f64>,
}

#[derive(Serialize)]
struct InferReport {
    checkpoint: PathBuf,
    mask_source: &'static str,
    images: Vec<InferEntry>,
}

fn infer(checkpoint: &Path, input: &Path, mask: Option<&Path>, out: &Path, batch_size: usize) -> Result<(), Failure> {
    if batch_size == 0 {
        return Err(Failure::config("batch size must be positive"));
    }
    let bundle = io::load_bundle(checkpoint)?;
    let dir = RunDir::create(out)?;
    let files = io::png_inputs(input)?;
    let (h, w) = (bundle.config.height, bundle.config.width);
    let mut images = Vec::with_capacity(files.len());
    for f in &files {
        let img = io::read_rgb(f)?;
        if (img.height(), img.width()) != (h, w) {
            return Err(Failure::data(format!("{} is {}x{}, model expects {h}x{w}", f.display(), img.height(), img.width())));
        }
        images.push(img);
    }
    let masks = match mask {
        None => None,
        Some(m) if m.is_file() => {
            if files.len() != 1 {
                return Err(Failure::config("a single mask file needs a single input image"));
            }
            Some(vec![io::read_mask(m)?])
        }
        Some(m) => Some(
            files
                .iter()
                .map(|f| io::read_mask(&m.join(f.file_name().expect("file has a name"))))
                .collect::<Result<Vec<_>, _>>()?,
        ),
    };
    let mut entries = Vec::new();
    for start in (0..files.len()).step_by(batch_size) {
        let end = (start + batch_size).min(files.len());
        let refs: Vec<_> = images[start..end].iter().collect();
        let mask_refs: Option<Vec<_>> = masks.as_ref().map(|m| m[start..end].iter().collect());
        let results = bundle.inpaint(&refs, mask_refs.as_deref())?;
        for (k, r) in results.into_iter().enumerate() {
            let file = &files[start + k];
            let stem = file.file_stem().expect("file has a name").to_string_lossy().to_string();
            let output = dir.images.join(format!("{stem}.png"));
            io::save_image(&output, &r.output)?;
            io::save_mask(&dir.images.join(format!("{stem}_mask.png")), &r.mask)?;
            let reference = to_color_mode(&images[start + k], bundle.config.generator.color);
            let m = compute_metrics(&r.output, &reference, &r.mask)?;
            entries.push(InferEntry {
                input: file.clone(),
                output,
                masked_pixels: m.masked_pixels,
                l1_to_input: m.l1,
                l1_to_input_outside_mask: m.l1_no_mask,
            });
        }
    }
    let report = InferReport {
        checkpoint: checkpoint.to_path_buf(),
        mask_source: if masks.is_some() { "given" } else { "predicted" },
        images: entries,
    };
    io::write_json(&dir.reports.join("infer.json"), &report)?;
    let mean = report.images.iter().map(|e| e.l1_to_input).sum::<f64>() / report.images.len() as f64;
    println!("inpainted {} images into {} (mean L1 to input {mean:.3}%)", report.images.len(), dir.images.display());
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, split: Option<String>, run: &RunArgs) -> Result<(), Failure> {
    let (mut config, dir) = prepare(run)?;
    if let Some(s) = split {
        config.eval.split = s;
    }
    dir.echo(&config)?;
    let bundle = io::load_bundle(checkpoint)?;
    let pairs = load_dataset(data, &config.eval.split, true)?;
    if pairs.is_empty() {
        return Err(Failure::data(format!("split `{}` is empty", config.eval.split)));
    }
    let report = evaluate_model(&bundle, &pairs, config.eval.mask_source, config.eval.batch_size)?;
    io::write_json(&dir.reports.join("eval.json"), &report)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    println!(
        "{} samples: L1 {:.3}%  L1_mask {}%  L1_no_mask {}%",
        report.samples,
        report.l1,
        fmt(report.l1_mask),
        fmt(report.l1_no_mask)
    );
    Ok(())
}

fn ablate(run: &RunArgs) -> Result<(), Failure> {
    let (mut config, dir) = prepare(run)?;
    dir.echo(&config)?;
    if config.train.checkpoint_dir.is_none() {
        config.train.checkpoint_dir = Some(dir.checkpoints.clone());
    }
    let data = TrainingData::load(&config.train.data)?;
    let grid = run_ablation_grid(&config.train, &data)?;
    io::write_json(&dir.reports.join("ablation.json"), &grid.report)?;
    let table = grid.report.to_table();
    io::write_text(&dir.reports.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn compare(checkpoint: Option<&Path>, data: &Path, split: Option<String>, run: &RunArgs) -> Result<(), Failure> {
    let (mut config, dir) = prepare(run)?;
    if let Some(s) = split {
        config.eval.split = s;
    }
    dir.echo(&config)?;
    let pairs = load_dataset(data, &config.eval.split, true)?;
    if pairs.is_empty() {
        return Err(Failure::data(format!("split `{}` is empty", config.eval.split)));
    }
    let loaded = match checkpoint {
        Some(path) => io::load_bundle(path).map_err(|e| e.to_string()),
        None => Err("no checkpoint given".to_string()),
    };
    let slot = match &loaded {
        Ok(b) => ModelSlot::Loaded(b),
        Err(reason) => {
            log::warn!("model skipped: {reason}");
            ModelSlot::Missing(reason.clone())
        }
    };
    let mut cmp = compare_methods(&pairs, slot, &config.compare)?;
    let grid = std::mem::take(&mut cmp.grid);
    if !grid.is_empty() {
        write_image_grid(&dir.images.join("comparison_grid.png"), &grid)?;
    }
    write_comparison(&cmp, &dir.reports)?;
    println!("{:<11} {:>8} {:>8} {:>11} {:>11}", "method", "L1", "L1_mask", "L1_no_mask", "shadow_mae");
    for m in &cmp.methods {
        match &m.report {
            Some(r) => println!(
                "{:<11} {:>8.3} {:>8} {:>11} {:>11}",
                m.method,
                r.l1,
                r.l1_mask.map_or("-".into(), |v| format!("{v:.3}")),
                r.l1_no_mask.map_or("-".into(), |v| format!("{v:.3}")),
                m.shadow_mae.map_or("-".into(), |v| format!("{:.3}", 100.0 * v)),
            ),
            None => println!("{:<11} skipped: {}", m.method, m.skipped.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

/// Generation parameters from a dataset manifest, else defaults, at the
/// model's resolution.
fn scene_params(data: Option<&Path>, bundle: &ModelBundle) -> Result<GenerationParams, Failure> {
    let base = match data {
        Some(root) => read_manifest(root)?.params.unwrap_or_default(),
        None => GenerationParams::default(),
    };
    Ok(base.with_size(bundle.config.height, bundle.config.width))
}

fn pilot(checkpoint: &Path, data: Option<&Path>, run: &RunArgs) -> Result<(), Failure> {
    let (config, dir) = prepare(run)?;
    dir.echo(&config)?;
    let bundle = io::load_bundle(checkpoint)?;
    let p = &config.pilot;
    let params = scene_params(data, &bundle)?;
    let scenes = pilot_scenes(&params, p.locations, p.variants, p.seed)?;
    let report = pilot_with_model(&bundle, &scenes, p.mask_source, p.batch_size)?;
    io::write_json(&dir.reports.join("pilot.json"), &report)?;
    println!("descriptor: {}", report.descriptor);
    println!(
        "same place:      {:.4} -> {:.4} ({:+.1}%)",
        report.same_place.before, report.same_place.after, report.same_place.change_percent
    );
    println!(
        "different place: {:.4} -> {:.4} ({:+.1}%)",
        report.different_place.before, report.different_place.after, report.different_place.change_percent
    );
    println!("nearest-neighbour place match: {:.3} -> {:.3}", report.nn_accuracy_before, report.nn_accuracy_after);
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    checkpoint: PathBuf,
    frames: usize,
    height: usize,
    width: usize,
    /// Absent when the bundle has no segmentation branch.
    segmentation_ms: Option<f64>,
    inpainting_ms: f64,
    total_ms: f64,
    fps: f64,
}

fn bench(checkpoint: &Path, data: Option<&Path>, run: &RunArgs) -> Result<(), Failure> {
    let (config, dir) = prepare(run)?;
    dir.echo(&config)?;
    let bundle = io::load_bundle(checkpoint)?;
    let b = &config.bench;
    let params = scene_params(data, &bundle)?;
    let frames = (0..b.warmup + b.frames)
        .map(|i| render_sample(b.seed, "bench", i, &params))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut seg, mut gen) = (0.0, 0.0);
    for (i, pair) in frames.iter().enumerate() {
        let img = [&pair.dynamic_img];
        let t0 = Instant::now();
        let channel = match &bundle.segmentation {
            Some(_) => bundle.predict_masks(&img)?.channel,
            None => masks_to_tensor(&[&pair.mask]),
        };
        let t1 = Instant::now();
        let mask = Some(&channel).filter(|_| bundle.config.generator.use_mask);
        bundle.generate(&img, mask)?;
        let t2 = Instant::now();
        if i >= b.warmup {
            seg += (t1 - t0).as_secs_f64();
            gen += (t2 - t1).as_secs_f64();
        }
    }
    let n = b.frames as f64;
    let segmentation_ms = bundle.segmentation.is_some().then_some(1e3 * seg / n);
    let inpainting_ms = 1e3 * gen / n;
    let total_ms = segmentation_ms.unwrap_or(0.0) + inpainting_ms;
    let report = BenchReport {
        checkpoint: checkpoint.to_path_buf(),
        frames: b.frames,
        height: bundle.config.height,
        width: bundle.config.width,
        segmentation_ms,
        inpainting_ms,
        total_ms,
        fps: 1e3 / total_ms,
    };
    io::write_json(&dir.reports.join("bench.json"), &report)?;
    match segmentation_ms {
        Some(s) => println!(
            "{total_ms:.2} ms/frame: segmentation {s:.2} ms + inpainting {inpainting_ms:.2} ms ({:.1} fps)",
            report.fps
        ),
        None => println!("{total_ms:.2} ms/frame: inpainting only, ground-truth masks ({:.1} fps)", report.fps),
    }
    Ok(())
}
