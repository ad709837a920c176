//! Finite-difference checks of every trainable parameter at 64-bit precision
//! on 8x8 inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stillframe::models::{
    ColorMode, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, SegmentationConfig, SegmentationNet,
};
use stillframe_nn::gradcheck::{check_parameters, GradCheckEntry};
use stillframe_nn::{Parameters, Tensor};

const TOLERANCE: f64 = 1e-3;

fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn assert_all_close(entries: &[GradCheckEntry]) {
    assert!(!entries.is_empty());
    let worst = entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    assert!(
        worst.rel_error < TOLERANCE,
        "{}[{}]: analytic {} numeric {} (rel {})",
        worst.param,
        worst.index,
        worst.analytic,
        worst.numeric,
        worst.rel_error
    );
}

#[test]
fn generator_parameters() {
    for use_mask in [true, false] {
        let cfg = GeneratorConfig { depth: 3, base_width: 3, use_mask, color: ColorMode::Gray };
        let mut g = Generator::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        // larger init so every layer is far from the flat regime
        g.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v *= 10.0));
        let x = random([2, cfg.input_channels(), 8, 8], 2);
        let w = random([2, 1, 8, 8], 3);
        g.zero_grad();
        let (_, cache) = g.forward(&x).unwrap();
        g.backward(&cache, &w);
        let entries = check_parameters(
            &mut g,
            &mut |g: &Generator<f64>| weighted_sum(&g.forward(&x).unwrap().0, &w),
            12,
            1e-6,
            1e-7,
        );
        assert_eq!(entries.iter().map(|e| &e.param).collect::<std::collections::BTreeSet<_>>().len(), g.param_names().len());
        assert_all_close(&entries);
    }
}

#[test]
fn discriminator_parameters() {
    let cfg = DiscriminatorConfig { base_width: 3, n_down: 1, use_mask: true, color: ColorMode::Gray };
    let mut d = Discriminator::<f64>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(4));
    d.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v *= 10.0));
    let x = random([2, cfg.input_channels(), 8, 8], 5);
    let (resp, cache) = d.forward(&x).unwrap();
    let w = random(resp.logits.shape(), 6);
    d.zero_grad();
    d.backward(&cache, &w);
    let entries = check_parameters(
        &mut d,
        &mut |d: &Discriminator<f64>| weighted_sum(&d.forward(&x).unwrap().0.logits, &w),
        12,
        1e-6,
        1e-7,
    );
    assert_all_close(&entries);
}

#[test]
fn segmentation_parameters() {
    let cfg = SegmentationConfig { classes: 6, in_channels: 3, width: 3, blocks: 1 };
    let mut s = SegmentationNet::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(7));
    let x = random([2, 3, 8, 8], 8);
    let w = random([2, 6, 8, 8], 9);
    s.zero_grad();
    let (_, cache) = s.forward(&x).unwrap();
    s.backward(&cache, &w);
    let entries = check_parameters(
        &mut s,
        &mut |s: &SegmentationNet<f64>| weighted_sum(&s.forward(&x).unwrap().0, &w),
        12,
        1e-6,
        1e-7,
    );
    assert_all_close(&entries);
}
