//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (outside the test harness capture) and appends it to
//! `acceptance_report.txt` in the cargo test temp dir.
//!
//! Criteria 8 to 11 share one toy training campaign: the four ablation
//! variants x 3 seeds on 2000 pairs at 64x64 for 20 epochs.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stillframe::evaluation::{
    compare_methods, compute_metrics, inpaint_diffusion, inpaint_fmm, pilot_scenes, pilot_with_model, CompareOptions,
    Comparison, ModelSlot, PilotReport,
};
use stillframe::imagecore::{BinaryMask, ClassTable, Image, ValueRange};
use stillframe::losses::{cgan_loss, l1_loss, mgan_loss, patch_weight_map, segmentation_loss};
use stillframe::models::{
    load_checkpoint, ColorMode, Discriminator, DiscriminatorConfig, DynamicHead, Generator, GeneratorConfig, MaskSource,
    ModelBundle, SegmentationConfig, SegmentationNet,
};
use stillframe::scenegen::{
    render_pair, render_sample, render_shadow_mask, sample_scene, sample_seed, GenerationParams, SamplePair, Town,
};
use stillframe::training::{
    fit_with_data, run_ablation_grid, AblationReport, Ablation, Architecture, TrainConfig, Trainer, TrainingData,
    Variant, BEST_CHECKPOINT,
};
use stillframe_nn::gradcheck::{check_parameters, GradCheckEntry};
use stillframe_nn::{Parameters, Tensor};

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance_report.txt");
    if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
        let _ = f.write_all(line.as_bytes());
    }
}

fn progress(msg: &str) {
    let _ = std::io::stderr().write_all(format!("  [acceptance] {msg}\n").as_bytes());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, ValueRange::Unit, (0..h * w * c).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// Rectangles over a sparse noise background, at a random density.
fn random_mask(rng: &mut impl Rng, h: usize, w: usize) -> BinaryMask {
    let mut data = vec![0u8; h * w];
    let noise = rng.random_range(0.0..0.2);
    for v in data.iter_mut() {
        *v = (rng.random::<f64>() < noise) as u8;
    }
    for _ in 0..rng.random_range(0..4) {
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..=h), rng.random_range(x0..=w));
        for y in y0..y1 {
            data[y * w + x0..y * w + x1].fill(1);
        }
    }
    BinaryMask::new(h, w, data).unwrap()
}

fn ensure_known_pixel(mask: BinaryMask, rng: &mut impl Rng) -> BinaryMask {
    if mask.count() < mask.data().len() {
        return mask;
    }
    let mut data = mask.data().to_vec();
    let i = rng.random_range(0..data.len());
    data[i] = 0;
    BinaryMask::new(mask.height(), mask.width(), data).unwrap()
}

// ---------------------------------------------------------------- 1

fn probs(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor<f64> {
    let n = shape.iter().product();
    // include values beyond the clamp on both ends
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| match rng.random_range(0..20) {
                0 => 0.0,
                1 => 1.0,
                2 => 1e-9,
                _ => rng.random::<f64>(),
            })
            .collect(),
    )
}

fn adversarial_oracle(real: &[f64], fake: &[f64], weights: Option<&[f64]>) -> (f64, f64) {
    let clamp = |p: f64| p.max(1e-7).min(1.0 - 1e-7);
    let n = real.len() as f64;
    let (mut d, mut g) = (0.0, 0.0);
    for i in 0..real.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        d += w * (-(clamp(real[i]).ln()) - (1.0 - clamp(fake[i])).ln());
        g += -w * clamp(fake[i]).ln();
    }
    (d / n, g / n)
}

#[test]
fn criterion_01_loss_oracles() {
    let began = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut bit_identical = true;
    for _ in 0..200 {
        let shape = [rng.random_range(1..3), 1, rng.random_range(1..6), rng.random_range(1..6)];
        let (real, fake) = (probs(&mut rng, shape), probs(&mut rng, shape));
        let weights = Tensor::from_vec(shape, (0..real.len()).map(|_| rng.random_range(1.0..3.0)).collect());

        let c = cgan_loss(&real, &fake).unwrap();
        let (d, g) = adversarial_oracle(real.data(), fake.data(), None);
        worst = worst.max((c.discriminator - d).abs()).max((c.generator - g).abs());
        let m = mgan_loss(&real, &fake, &weights).unwrap();
        let (d, g) = adversarial_oracle(real.data(), fake.data(), Some(weights.data()));
        worst = worst.max((m.discriminator - d).abs()).max((m.generator - g).abs());
        let ones = Tensor::full(shape, 1.0);
        let m1 = mgan_loss(&real, &fake, &ones).unwrap();
        bit_identical &= m1.discriminator.to_bits() == c.discriminator.to_bits()
            && m1.generator.to_bits() == c.generator.to_bits();

        // l1 with and without a region
        let (h, w, ch) = (rng.random_range(1..7), rng.random_range(1..7), if rng.random() { 1 } else { 3 });
        let (a, b) = (random_image(&mut rng, h, w, ch), random_image(&mut rng, h, w, ch));
        let region = random_mask(&mut rng, h, w);
        let (mut all, mut inside, mut n_in) = (0.0, 0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                for k in 0..ch {
                    let e = (a.get(k, y, x) as f64 - b.get(k, y, x) as f64).abs();
                    all += e;
                    if region.get(y, x) {
                        inside += e;
                        n_in += 1;
                    }
                }
            }
        }
        worst = worst.max((l1_loss(&a, &b, None).unwrap().value - all / (h * w * ch) as f64).abs());
        let masked = l1_loss(&a, &b, Some(&region)).unwrap();
        let expected = if n_in == 0 { 0.0 } else { inside / n_in as f64 };
        assert_eq!(masked.empty_region, n_in == 0);
        worst = worst.max((masked.value - expected).abs());

        // weighted cross-entropy and its gradient
        let (n, c, h, w) = (rng.random_range(1..3), rng.random_range(2..7), rng.random_range(1..5), rng.random_range(1..5));
        let logits = Tensor::from_vec([n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-4.0..4.0)).collect());
        let labels: Vec<Vec<u8>> = (0..n).map(|_| (0..h * w).map(|_| rng.random_range(0..c) as u8).collect()).collect();
        let class_w: Vec<f32> = (0..c).map(|_| rng.random_range(0.5f32..2.0)).collect();
        let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
        let (loss, grad) = segmentation_loss(&logits, &refs, &class_w).unwrap();
        let total = (n * h * w) as f64;
        let mut oracle = 0.0;
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let z: Vec<f64> = (0..c).map(|k| logits.at(b, k, y, x)).collect();
                    let denom: f64 = z.iter().map(|v| v.exp()).sum();
                    let label = labels[b][y * w + x] as usize;
                    let wt = class_w[label] as f64;
                    oracle += -wt * (z[label].exp() / denom).ln();
                    for k in 0..c {
                        let p = z[k].exp() / denom;
                        let expected = wt * (p - (k == label) as u8 as f64) / total;
                        worst = worst.max((grad.at(b, k, y, x) - expected).abs());
                    }
                }
            }
        }
        worst = worst.max((loss - oracle / total).abs());
    }
    let secs = began.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && bit_identical && secs < 60.0;
    report(1, pass, &format!("max deviation {worst:.2e}, unit-weight mask loss bit-identical {bit_identical}, {secs:.1} s"));
    assert!(pass);
}

// ---------------------------------------------------------------- 2

/// Input rows feeding output row `r`: expand the index set back through each
/// layer (kernel 4, padding 1; stride 2 for the downsampling layers, then two
/// stride-1 layers) and keep what lies inside the image.
fn contributing(r: usize, n_down: usize, size: usize) -> Vec<usize> {
    let strides: Vec<i64> = std::iter::repeat_n(2, n_down).chain([1, 1]).collect();
    let mut set: BTreeSet<i64> = [r as i64].into();
    for &s in strides.iter().rev() {
        set = set.iter().flat_map(|&i| (0..4).map(move |k| i * s - 1 + k)).collect();
    }
    set.into_iter().filter(|&i| i >= 0 && i < size as i64).map(|i| i as usize).collect()
}

#[test]
fn criterion_02_patch_weight_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut checked = 0;
    let mut exact = true;
    while checked < 100 {
        let n_down = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(8..=72), rng.random_range(8..=72));
        let cfg = DiscriminatorConfig { base_width: 1, n_down, use_mask: true, color: ColorMode::Gray };
        let Ok(geometry) = cfg.patch_geometry(h, w) else { continue };
        let mask = random_mask(&mut rng, h, w);
        let gamma = rng.random_range(1.0..5.0);
        let map = patch_weight_map(&mask, &geometry, gamma).unwrap();
        let (gh, gw) = geometry.output;
        exact &= (map.height, map.width) == (gh, gw);
        for r in 0..gh {
            let rows = contributing(r, n_down, h);
            for c in 0..gw {
                let cols = contributing(c, n_down, w);
                let count = rows.iter().flat_map(|&y| cols.iter().map(move |&x| (y, x))).filter(|&(y, x)| mask.get(y, x)).count();
                let coverage = count as f64 / (rows.len() * cols.len()) as f64;
                exact &= map.get(r, c) == 1.0 + coverage * (gamma - 1.0);
            }
        }
        checked += 1;
    }
    let geometry = DiscriminatorConfig::default().patch_geometry(64, 64).unwrap();
    let empty = patch_weight_map(&BinaryMask::zeros(64, 64), &geometry, 2.0).unwrap();
    let full = patch_weight_map(&BinaryMask::ones(64, 64), &geometry, 2.0).unwrap();
    let ones = empty.data.iter().all(|&v| v == 1.0);
    let twos = full.data.iter().all(|&v| v == 2.0);
    let pass = exact && ones && twos;
    report(2, pass, &format!("100 random geometries exact {exact}, empty mask all ones {ones}, full mask at 2 all twos {twos}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_dynamic_head() {
    let mut formulas = true;
    let mut zero_sum = 0.0f64;
    let mut uniform_worst = 0.0f64;
    for n in 2..=30usize {
        for n_dyn in 1..n {
            // dynamic classes spread over the table
            let flags: Vec<bool> = (0..n).map(|i| (i * n_dyn) % n < n_dyn).collect();
            assert_eq!(flags.iter().filter(|&&f| f).count(), n_dyn);
            let head = DynamicHead::from_flags(&flags);
            let (wd, ws) = ((n - n_dyn) as f64 / n as f64, -(n_dyn as f64) / n as f64);
            formulas &= head.dynamic_weight == wd && head.static_weight == ws;
            formulas &= head.weights().iter().zip(&flags).all(|(&w, &f)| w == if f { wd } else { ws });
            zero_sum = zero_sum.max(head.weights().iter().sum::<f64>().abs());
            let (soft, _) = head.forward(&Tensor::<f64>::zeros([1, n, 2, 2])).unwrap();
            uniform_worst = uniform_worst.max(soft.max_abs());
        }
    }
    let urban = ClassTable::urban();
    let head = DynamicHead::new(&urban).unwrap();
    let (soft, _) = head.forward(&Tensor::<f32>::zeros([2, 6, 3, 3])).unwrap();
    let uniform_exact = soft.data().iter().all(|&v| v == 0.0);
    let (soft64, _) = head.forward(&Tensor::<f64>::zeros([1, 6, 3, 3])).unwrap();
    let uniform_exact = uniform_exact && soft64.data().iter().all(|&v| v == 0.0);

    let dynamic = urban.dynamic_flags().iter().position(|&d| d).unwrap();
    let mut logits = Tensor::<f64>::zeros([1, 6, 1, 1]);
    logits.set(0, dynamic, 0, 0, 200.0);
    let expected = ((6.0 - 2.0) / 6.0f64).tanh();
    let one_hot = (head.forward(&logits).unwrap().0.data()[0] - expected).abs();

    // 100 joint training steps leave the head alone
    let pairs: Vec<SamplePair> = (0..4).map(|i| render_sample(3, "train", i, &GenerationParams::default().with_size(32, 32)).unwrap()).collect();
    let cfg = TrainConfig {
        batch_size: 1,
        warmup_epochs: 0,
        architecture: tiny_architecture(),
        ablation: Ablation { masks: MaskSource::Segmentation, ..Default::default() },
        ..Default::default()
    };
    let bundle = ModelBundle::new(cfg.model_config(32, 32, 6), urban.clone(), 9).unwrap();
    let mut trainer = Trainer::new(cfg, bundle, Vec::new()).unwrap();
    let bits = |h: &DynamicHead| h.weights().iter().map(|w| w.to_bits()).collect::<Vec<_>>();
    let before = bits(trainer.head());
    for step in 0..100 {
        trainer.train_step(&pairs[step % pairs.len()..step % pairs.len() + 1]).unwrap();
    }
    let unchanged = bits(trainer.head()) == before && before == bits(&head);

    let pass = formulas && zero_sum <= 1e-12 && uniform_exact && uniform_worst <= 1e-12 && one_hot <= 1e-6 && unchanged;
    report(
        3,
        pass,
        &format!(
            "formulas exact {formulas}, zero-sum residual {zero_sum:.1e}, uniform input exactly 0 on the urban table {uniform_exact} \
             (all n <= 30 within {uniform_worst:.1e}), one-hot error {one_hot:.1e}, weights unchanged after 100 steps {unchanged}"
        ),
    );
    assert!(pass);
}

fn tiny_architecture() -> Architecture {
    Architecture {
        generator_depth: 4,
        generator_width: 4,
        discriminator_width: 4,
        discriminator_layers: 2,
        segmentation_width: 4,
        segmentation_blocks: 1,
    }
}

// ---------------------------------------------------------------- 4

fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn worst(entries: &[GradCheckEntry]) -> f64 {
    entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
}

#[test]
fn criterion_04_gradient_checks() {
    let began = Instant::now();
    let mut results = Vec::new();
    let mut all_groups = true;

    for use_mask in [true, false] {
        let cfg = GeneratorConfig { depth: 3, base_width: 3, use_mask, color: ColorMode::Gray };
        let mut g = Generator::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        g.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v *= 10.0));
        let x = random_tensor([2, cfg.input_channels(), 8, 8], 2);
        let w = random_tensor([2, 1, 8, 8], 3);
        g.zero_grad();
        let (_, cache) = g.forward(&x).unwrap();
        g.backward(&cache, &w);
        let e = check_parameters(&mut g, &mut |g: &Generator<f64>| weighted_sum(&g.forward(&x).unwrap().0, &w), 12, 1e-6, 1e-7);
        all_groups &= e.iter().map(|e| &e.param).collect::<BTreeSet<_>>().len() == g.param_names().len();
        results.push(("generator", worst(&e)));
    }

    let cfg = DiscriminatorConfig { base_width: 3, n_down: 1, use_mask: true, color: ColorMode::Gray };
    let mut d = Discriminator::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4));
    d.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v *= 10.0));
    let x = random_tensor([2, cfg.input_channels(), 8, 8], 5);
    let (resp, cache) = d.forward(&x).unwrap();
    let w = random_tensor(resp.logits.shape(), 6);
    d.zero_grad();
    d.backward(&cache, &w);
    let e = check_parameters(&mut d, &mut |d: &Discriminator<f64>| weighted_sum(&d.forward(&x).unwrap().0.logits, &w), 12, 1e-6, 1e-7);
    all_groups &= e.iter().map(|e| &e.param).collect::<BTreeSet<_>>().len() == d.param_names().len();
    results.push(("discriminator", worst(&e)));

    let cfg = SegmentationConfig { classes: 6, in_channels: 3, width: 3, blocks: 1 };
    let mut s = SegmentationNet::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(7));
    let x = random_tensor([2, 3, 8, 8], 8);
    let w = random_tensor([2, 6, 8, 8], 9);
    s.zero_grad();
    let (_, cache) = s.forward(&x).unwrap();
    s.backward(&cache, &w);
    let e = check_parameters(&mut s, &mut |s: &SegmentationNet<f64>| weighted_sum(&s.forward(&x).unwrap().0, &w), 12, 1e-6, 1e-7);
    all_groups &= e.iter().map(|e| &e.param).collect::<BTreeSet<_>>().len() == s.param_names().len();
    results.push(("segmentation", worst(&e)));

    let secs = began.elapsed().as_secs_f64();
    let max = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = max < 1e-3 && all_groups && secs < 300.0;
    let detail: Vec<String> = results.iter().map(|(n, v)| format!("{n} {v:.1e}")).collect();
    report(4, pass, &format!("worst relative error: {}; every parameter checked {all_groups}; {secs:.1} s", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_scenegen_invariants() {
    let params = GenerationParams::default();
    let urban = ClassTable::urban();
    let (mut agree, mut membership, mut shadows, mut regen) = (true, true, true, true);
    let mut shadow_pixels = 0usize;
    for i in 0..500 {
        let split = if i % 2 == 0 { "train" } else { "test" };
        let pair = render_sample(55, split, i, &params).unwrap();
        let again = render_sample(55, split, i, &params).unwrap();
        regen &= pair.dynamic_img.to_u8_interleaved() == again.dynamic_img.to_u8_interleaved()
            && pair.static_img.to_u8_interleaved() == again.static_img.to_u8_interleaved()
            && pair.labels.data() == again.labels.data()
            && pair.mask.data() == again.mask.data();

        let town = if split == "train" { Town::A } else { Town::B };
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(55, split, i));
        let spec = sample_scene(&mut rng, &GenerationParams { town, ..params.clone() }).unwrap();
        let shadow = render_shadow_mask(&spec);
        let rendered = render_pair(&spec);
        regen &= rendered.dynamic_img == pair.dynamic_img;

        let (h, w) = (pair.height(), pair.width());
        for y in 0..h {
            for x in 0..w {
                let m = pair.mask.get(y, x);
                membership &= m == urban.is_dynamic(pair.labels.get(y, x));
                let same = (0..3).all(|c| pair.dynamic_img.get(c, y, x) == pair.static_img.get(c, y, x));
                if shadow.get(y, x) {
                    shadow_pixels += 1;
                    shadows &= !m && !same;
                } else if !m {
                    agree &= same;
                }
            }
        }
    }
    let pass = agree && membership && shadows && regen && shadow_pixels > 0;
    report(
        5,
        pass,
        &format!(
            "500 pairs: agreement outside objects and shadows {agree}, mask = dynamic labels {membership}, \
             {shadow_pixels} shadow pixels all changed and unmasked {shadows}, byte-identical regeneration {regen}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

/// Dense Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Harmonic fill of the hole: every hole pixel equals the mean of its
/// in-image 4-neighbours.
fn laplace_oracle(img: &Image, mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let hole: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask.data()[i] == 1).map(|i| (i / w, i % w)).collect();
    let index = |y: usize, x: usize| hole.iter().position(|&p| p == (y, x));
    let n = hole.len();
    let mut a = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (r, &(y, x)) in hole.iter().enumerate() {
        let nbrs: Vec<(usize, usize)> = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
            .iter()
            .map(|(dy, dx)| (y as i64 + dy, x as i64 + dx))
            .filter(|&(yy, xx)| yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64)
            .map(|(yy, xx)| (yy as usize, xx as usize))
            .collect();
        a[r][r] = nbrs.len() as f64;
        for (yy, xx) in nbrs {
            match index(yy, xx) {
                Some(k) => a[r][k] -= 1.0,
                None => b[r] += img.get(0, yy, xx) as f64,
            }
        }
    }
    solve(a, b)
}

#[test]
fn criterion_06_inpainting_baselines() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut constant_err = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(8..40), rng.random_range(8..40));
        let value = rng.random::<f32>();
        let img = Image::filled(h, w, 3, ValueRange::Unit, value);
        let mask = ensure_known_pixel(random_mask(&mut rng, h, w), &mut rng);
        for out in [inpaint_fmm(&img, &mask, 5.0).unwrap(), inpaint_diffusion(&img, &mask, 10_000).unwrap()] {
            constant_err = constant_err.max(out.data().iter().map(|&v| (v - value).abs() as f64).fold(0.0, f64::max));
        }
    }

    let mut laplace_err = 0.0f64;
    for _ in 0..5 {
        let img = random_image(&mut rng, 16, 16, 1);
        let mask = ensure_known_pixel(random_mask(&mut rng, 16, 16), &mut rng);
        let out = inpaint_diffusion(&img, &mask, 100_000).unwrap();
        let oracle = laplace_oracle(&img, &mask);
        let filled = (0..256).filter(|&i| mask.data()[i] == 1).map(|i| out.data()[i] as f64);
        laplace_err = filled.zip(oracle).map(|(a, b)| (a - b).abs()).fold(laplace_err, f64::max);
    }

    let mut bounded = true;
    for _ in 0..100 {
        let (h, w, c) = (rng.random_range(4..32), rng.random_range(4..32), if rng.random() { 1 } else { 3 });
        let img = random_image(&mut rng, h, w, c);
        let mask = ensure_known_pixel(random_mask(&mut rng, h, w), &mut rng);
        for out in [inpaint_fmm(&img, &mask, rng.random_range(1.0..8.0)).unwrap(), inpaint_diffusion(&img, &mask, 10_000).unwrap()] {
            for ch in 0..c {
                let known = (0..h * w).filter(|&i| mask.data()[i] == 0).map(|i| img.plane(ch)[i]);
                let (lo, hi) = known.fold((f32::MAX, f32::MIN), |(l, u), v| (l.min(v), u.max(v)));
                bounded &= out.plane(ch).iter().all(|&v| v >= lo && v <= hi);
                bounded &= (0..h * w).filter(|&i| mask.data()[i] == 0).all(|i| out.plane(ch)[i] == img.plane(ch)[i]);
            }
        }
    }
    let pass = constant_err < 1e-3 && laplace_err < 1e-4 && bounded;
    report(
        6,
        pass,
        &format!("constant fill error {constant_err:.1e}, diffusion vs direct solve {laplace_err:.1e}, max principle on 100 instances {bounded}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_metric_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let (h, w, c) = (rng.random_range(1..24), rng.random_range(1..24), if rng.random() { 1 } else { 3 });
        let (pred, target) = (random_image(&mut rng, h, w, c), random_image(&mut rng, h, w, c));
        let mask = match i % 10 {
            0 => BinaryMask::zeros(h, w),
            1 => BinaryMask::ones(h, w),
            _ => random_mask(&mut rng, h, w),
        };
        let m = compute_metrics(&pred, &target, &mask).unwrap();
        let inside = m.l1_mask.unwrap_or(0.0) * m.masked_pixels as f64;
        let outside = m.l1_no_mask.unwrap_or(0.0) * (m.pixels - m.masked_pixels) as f64;
        worst = worst.max(((m.l1 * m.pixels as f64) - (inside + outside)).abs() / (m.l1 * m.pixels as f64).max(1.0));
        assert_eq!(m.l1_mask.is_none(), mask.count() == 0);
        assert_eq!(m.l1_no_mask.is_none(), mask.count() == h * w);
    }
    // agreement up to the last bits of double rounding
    let pass = worst <= 1e-12;
    report(7, pass, &format!("200 triples, largest relative residual {worst:.1e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 8-11

const DATA_SEED: u64 = 7;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Campaign {
    data: TrainingData,
    grids: Vec<AblationReport>,
    /// Best-validation full-variant bundle per seed.
    models: Vec<ModelBundle>,
    minutes: f64,
    _dir: tempfile::TempDir,
}

fn toy_config(seed: u64, checkpoints: PathBuf) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 8,
        seed,
        architecture: Architecture { generator_width: 8, discriminator_width: 8, ..Default::default() },
        checkpoint_dir: Some(checkpoints),
        ..Default::default()
    }
}

fn campaign() -> &'static Campaign {
    static CAMPAIGN: OnceLock<Campaign> = OnceLock::new();
    CAMPAIGN.get_or_init(|| {
        let began = Instant::now();
        let params = GenerationParams::default();
        let split = |name: &str, n: usize| (0..n).map(|i| render_sample(DATA_SEED, name, i, &params).unwrap()).collect::<Vec<_>>();
        let data = TrainingData {
            classes: ClassTable::urban(),
            height: 64,
            width: 64,
            train: split("train", 2000),
            validation: split("val", 100),
            test: split("test", 200),
            real: Vec::new(),
            class_frequencies: Vec::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        let mut grids = Vec::new();
        let mut models = Vec::new();
        for seed in SEEDS {
            progress(&format!("ablation grid, seed {seed} ({:.0} min elapsed)", began.elapsed().as_secs_f64() / 60.0));
            let ckpt = dir.path().join(format!("seed{seed}"));
            let run = run_ablation_grid(&toy_config(seed, ckpt.clone()), &data).unwrap();
            progress(&format!("seed {seed}:\n{}", run.report.to_table()));
            grids.push(run.report);
            models.push(load_checkpoint(&ckpt.join(Variant::MaskedBoth.slug()).join(BEST_CHECKPOINT)).unwrap());
        }
        Campaign { data, grids, models, minutes: began.elapsed().as_secs_f64() / 60.0, _dir: dir }
    })
}

fn comparisons() -> &'static Vec<Comparison> {
    static CMP: OnceLock<Vec<Comparison>> = OnceLock::new();
    CMP.get_or_init(|| {
        let c = campaign();
        c.models.iter().map(|m| compare_methods(&c.data.test, ModelSlot::Loaded(m), &CompareOptions::default()).unwrap()).collect()
    })
}

#[test]
fn criterion_08_ablation_ordering() {
    let c = campaign();
    let metric = |v: Variant, pick: fn(&stillframe::evaluation::MetricsReport) -> Option<f64>| {
        median(c.grids.iter().map(|g| pick(g.column(v).unwrap()).unwrap()).collect())
    };
    let mask = |v| metric(v, |m| m.l1_mask);
    let (both, gen, plain) = (mask(Variant::MaskedBoth), mask(Variant::MaskedGenerator), mask(Variant::GrayPlain));
    let (gray, rgb) = (metric(Variant::GrayPlain, |m| m.l1_no_mask), metric(Variant::RgbPlain, |m| m.l1_no_mask));
    let within_budget = c.minutes <= 240.0;
    let pass = both <= gen && gen <= plain && gray <= rgb && within_budget;
    report(
        8,
        pass,
        &format!(
            "median L1_mask masked_both {both:.3} <= masked_generator {gen:.3} <= gray_plain {plain:.3}; \
             L1_no_mask gray {gray:.3} <= rgb {rgb:.3}; {:.0} min",
            c.minutes
        ),
    );
    assert!(pass);
}

fn method(cmp: &Comparison, name: &str) -> (f64, Option<f64>) {
    let m = cmp.method(name).unwrap();
    (m.report.as_ref().unwrap().l1_mask.unwrap(), m.shadow_mae)
}

#[test]
fn criterion_09_model_beats_baselines() {
    let cmps = comparisons();
    let model = median(cmps.iter().map(|c| method(c, "model").0).collect());
    let (copy, diffusion, fmm) = (method(&cmps[0], "copy_input").0, method(&cmps[0], "diffusion").0, method(&cmps[0], "fmm").0);
    let pass = model < copy && model < diffusion;
    report(
        9,
        pass,
        &format!("held-out L1_mask: model (median) {model:.3}, copy_input {copy:.3}, diffusion {diffusion:.3}, fmm {fmm:.3} (recorded)"),
    );
    assert!(pass);
}

#[test]
fn criterion_10_shadow_removal() {
    let cmps = comparisons();
    let model = median(cmps.iter().map(|c| method(c, "model").1.unwrap()).collect());
    let copy = method(&cmps[0], "copy_input").1.unwrap();
    let reduction = 100.0 * (copy - model) / copy;
    let pass = reduction >= 25.0;
    report(10, pass, &format!("shadow-pixel MAE model (median) {model:.3} vs copy_input {copy:.3}: {reduction:.1}% lower"));
    assert!(pass);
}

#[test]
fn criterion_11_place_recognition_pilot() {
    let c = campaign();
    let reports: Vec<PilotReport> = SEEDS
        .iter()
        .zip(&c.models)
        .map(|(&seed, m)| {
            let scenes = pilot_scenes(&GenerationParams::default(), 6, 4, seed).unwrap();
            pilot_with_model(m, &scenes, MaskSource::GroundTruth, 8).unwrap()
        })
        .collect();
    let wins = reports
        .iter()
        .filter(|r| r.same_place_reduction_percent > 0.0 && r.different_place_increase_percent > 0.0)
        .count();
    let pass = wins * 2 > reports.len();
    let detail: Vec<String> = reports
        .iter()
        .map(|r| format!("{:+.1}%/{:+.1}%", r.same_place_reduction_percent, r.different_place_increase_percent))
        .collect();
    report(11, pass, &format!("{wins}/3 seeds improve both (same-place reduction / different-place increase: {})", detail.join(", ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 12

fn weight_bits(b: &ModelBundle) -> Vec<u32> {
    let mut v = Vec::new();
    b.generator.visit(&mut |p| v.extend(p.value.iter().map(|x| x.to_bits())));
    b.discriminator.visit(&mut |p| v.extend(p.value.iter().map(|x| x.to_bits())));
    if let Some(s) = &b.segmentation {
        s.visit(&mut |p| v.extend(p.value.iter().map(|x| x.to_bits())));
    }
    v
}

#[test]
fn criterion_12_reproducibility() {
    let params = GenerationParams::default().with_size(32, 32);
    let data = TrainingData {
        classes: ClassTable::urban(),
        height: 32,
        width: 32,
        train: (0..12).map(|i| render_sample(12, "train", i, &params).unwrap()).collect(),
        validation: (0..4).map(|i| render_sample(12, "val", i, &params).unwrap()).collect(),
        test: Vec::new(),
        real: Vec::new(),
        class_frequencies: Vec::new(),
    };
    let dir = tempfile::tempdir().unwrap();
    let config = |epochs: usize, name: &str, resume: bool| TrainConfig {
        epochs,
        batch_size: 1,
        seed: 3,
        warmup_epochs: 1,
        architecture: tiny_architecture(),
        ablation: Ablation { masks: MaskSource::Segmentation, ..Default::default() },
        checkpoint_dir: Some(dir.path().join(name)),
        resume,
        ..Default::default()
    };
    let (a, ra) = fit_with_data(&config(3, "a", false), &data).unwrap();
    let (b, rb) = fit_with_data(&config(3, "b", false), &data).unwrap();
    let identical = a.train_state == b.train_state && ra.epochs == rb.epochs && weight_bits(&a) == weight_bits(&b);

    fit_with_data(&config(1, "c", false), &data).unwrap();
    let (c, rc) = fit_with_data(&config(3, "c", true), &data).unwrap();
    let resumed = c.train_state == a.train_state && rc.epochs == ra.epochs && weight_bits(&c) == weight_bits(&a);
    let pass = identical && resumed;
    report(12, pass, &format!("identical runs match {identical}, resume after epoch 1 matches uninterrupted {resumed}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 13

#[test]
fn criterion_13_end_to_end_smoke() {
    let began = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("smoke.toml"), "name = \"smoke\"\n[train]\nepochs = 1\n").unwrap();
    let steps: [&[&str]; 7] = [
        &["generate", "--out", "data", "--n", "50", "--seed", "13", "--split", "train"],
        &["generate", "--out", "data", "--n", "10", "--seed", "13", "--split", "val", "--split", "test"],
        &["train", "--config", "smoke.toml"],
        &["infer", "--checkpoint", "runs/smoke/checkpoints", "--input", "data/test/dynamic", "--out", "inferred"],
        &["eval", "--checkpoint", "runs/smoke/checkpoints", "--data", "data", "--out", "evaluated"],
        &["compare", "--checkpoint", "runs/smoke/checkpoints", "--data", "data", "--out", "compared"],
        &["compare", "--data", "data", "--out", "baselines"],
    ];
    let mut failed = None;
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_stillframe")).args(args).current_dir(p).env("RUST_LOG", "warn").output().unwrap();
        if !out.status.success() {
            failed = Some(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
            break;
        }
    }
    let secs = began.elapsed().as_secs_f64();
    let pass = failed.is_none() && secs < 600.0 && p.join("compared/reports/comparison.csv").exists();
    report(13, pass, &format!("generate 50 -> train 1 epoch -> infer -> eval -> compare: {} in {secs:.0} s", failed.as_deref().unwrap_or("all exit 0")));
    assert!(pass, "{failed:?}");
}
