use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stillframe::imagecore::{augment, AugmentationConfig};
use stillframe::scenegen::{render_pair, sample_scene, GenerationParams, SamplePair};

fn pair(seed: u64) -> SamplePair {
    let spec = sample_scene(&mut ChaCha8Rng::seed_from_u64(seed), &GenerationParams::default()).unwrap();
    render_pair(&spec)
}

#[test]
fn identity_config_is_bit_exact() {
    let p = pair(1);
    let out = augment(&p, &AugmentationConfig::identity(), &mut ChaCha8Rng::seed_from_u64(3));
    assert_eq!(out, p);
}

#[test]
fn flip_is_an_involution() {
    let p = pair(2);
    let cfg = AugmentationConfig { flip_probability: 1.0, ..AugmentationConfig::identity() };
    let once = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    assert_ne!(once, p);
    let (w, h) = (p.width(), p.height());
    for y in 0..h {
        for x in 0..w {
            assert_eq!(once.dynamic_img.get(0, y, x), p.dynamic_img.get(0, y, w - 1 - x));
            assert_eq!(once.mask.get(y, x), p.mask.get(y, w - 1 - x));
            assert_eq!(once.labels.get(y, x), p.labels.get(y, w - 1 - x));
        }
    }
    let twice = augment(&once, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(twice, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_output(scene in 0u64..50, seed in any::<u64>()) {
        let p = pair(scene);
        let cfg = AugmentationConfig::moderate();
        let a = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.mask.data().iter().all(|&m| m <= 1));
        prop_assert_eq!(stillframe::imagecore::mask_from_labels(&a.labels), a.mask.clone());
        prop_assert!(a.dynamic_img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn photometric_transform_is_shared(scene in 0u64..50, seed in any::<u64>()) {
        // without blur/noise a pixel equal in both images stays equal
        let p = pair(scene);
        let cfg = AugmentationConfig { blur_sigma: (0.0, 0.0), noise_sigma: (0.0, 0.0), flip_probability: 0.0, ..AugmentationConfig::moderate() };
        let a = augment(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let n = p.height() * p.width();
        for i in 0..n {
            let same = (0..3).all(|c| p.dynamic_img.plane(c)[i] == p.static_img.plane(c)[i]);
            if same {
                for c in 0..3 {
                    prop_assert_eq!(a.dynamic_img.plane(c)[i], a.static_img.plane(c)[i]);
                }
            }
        }
    }
}
