use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sherlock::corpus::{render_with_ink, sample_writer};
use sherlock::energy::{apply_operator, DenoisedSample, EnergyOperator};
use sherlock::numerics::{fft2, Tape, Tensor};
use sherlock::patching::{
    augment, patch_energy_scores, reassemble, split_patches, AugmentationPolicy, Transform, ViewPlan,
};

fn random_sample(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DenoisedSample {
    let mut field = || Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    DenoisedSample {
        intensity: field(),
        energy: field(),
        source: None,
    }
}

/// Spectral power outside the inner half of the frequency plane.
fn high_band_power(x: &Tensor) -> f64 {
    let f = fft2(x).unwrap();
    let (h, w) = (f.height, f.width);
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let fr = r.min(h - r) as f64 / h as f64;
            let fc = c.min(w - c) as f64 / w as f64;
            if fr.hypot(fc) > 0.25 {
                total += f.get(r, c).norm_sqr();
            }
        }
    }
    total
}

#[test]
fn blur_lowers_high_frequency_power() {
    let pol = AugmentationPolicy::only(&[Transform::GaussianBlur]);
    for s in 0..5u64 {
        let img = render_with_ink(&sample_writer(s), s, 64, 64).unwrap().page.image.to_unit();
        let sample = apply_operator(&img, &EnergyOperator::default(), None).unwrap();
        let (a, b) = augment(&sample, None, &pol, s).unwrap();
        let before = high_band_power(&sample.intensity);
        assert!(high_band_power(&a.intensity) < before);
        assert!(high_band_power(&b.intensity) < before);
    }
}

#[test]
fn scores_match_a_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = random_sample(&mut rng, 24, 16);
    let p = 8;
    let scores = patch_energy_scores(&split_patches(&s, p).unwrap());
    let mut k = 0;
    for gr in 0..24 / p {
        for gc in 0..16 / p {
            let mut acc = 0.0;
            for r in 0..p {
                for c in 0..p {
                    acc += s.energy.at2(gr * p + r, gc * p + c);
                }
            }
            assert!((scores[k] - acc / (p * p) as f64).abs() < 1e-12);
            k += 1;
        }
    }
}

#[test]
fn clamping_is_counted() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = DenoisedSample {
        intensity: Tensor::filled(&[8, 8], 0.95),
        energy: Tensor::filled(&[8, 8], 0.5),
        source: None,
    };
    let pol = AugmentationPolicy {
        brightness: (0.1, 0.2),
        ..AugmentationPolicy::only(&[Transform::Brightness])
    };
    let plan = ViewPlan::sample(&pol, &mut rng, 8, 8, 1, 0);
    let mut t = Tape::new();
    let x = t.constant(s.stacked());
    let v = plan.apply_on_tape(&mut t, &[x], 0).unwrap();
    assert_eq!(v.clamped, 64);
    assert!(t.value(v.view).data()[..64].iter().all(|&p| p == 1.0));
    assert!(t.value(v.view).data()[64..].iter().all(|&p| p == 0.5));
}

#[test]
fn view_gradients_reach_the_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_sample(&mut rng, 8, 8);
    let plan = ViewPlan::sample(&AugmentationPolicy::only(&[Transform::CropResize, Transform::GaussianBlur]), &mut rng, 8, 8, 1, 0);
    let mut t = Tape::new();
    let x = t.param(s.stacked());
    let v = plan.apply_on_tape(&mut t, &[x], 0).unwrap();
    let l = t.sum(v.view);
    let g = t.backward(l).unwrap();
    let total: f64 = g.get(x).data().iter().sum();
    // crop, blur and the clamp (inputs in range) preserve mass per output pixel
    assert!((total - 128.0).abs() < 1e-9, "{total}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reassembly_inverts_splitting(seed in any::<u64>(), gh in 1usize..5, gw in 1usize..5, p in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, gh * p, gw * p);
        let seq = split_patches(&s, p).unwrap();
        prop_assert_eq!(seq.len() * p * p, gh * gw * p * p);
        let back = reassemble(&seq).unwrap();
        prop_assert_eq!(back.intensity, s.intensity);
        prop_assert_eq!(back.energy, s.energy);
    }

    #[test]
    fn views_stay_in_unit_range(seed in any::<u64>(), view in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, 16, 16);
        let p = random_sample(&mut rng, 16, 16);
        let pol = AugmentationPolicy {
            enabled: [
                Transform::GaussianBlur,
                Transform::Mixup,
                Transform::HorizontalFlip,
                Transform::CropResize,
                Transform::Brightness,
                Transform::AdditiveNoise,
            ]
            .into_iter()
            .collect(),
            seed,
            ..Default::default()
        };
        let (a, b) = augment(&s, Some(&p), &pol, view).unwrap();
        for v in [a, b] {
            prop_assert!(v.intensity.data().iter().chain(v.energy.data()).all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn mixup_is_convex_in_both_channels(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sample(&mut rng, 8, 8);
        let p = random_sample(&mut rng, 8, 8);
        let pol = AugmentationPolicy::only(&[Transform::Mixup]);
        let plan = ViewPlan::sample(&pol, &mut rng, 8, 8, 2, 0);
        let (partner, lambda) = plan.mix.unwrap();
        prop_assert_eq!(partner, 1);
        let mut t = Tape::new();
        let xs = [t.constant(s.stacked()), t.constant(p.stacked())];
        let v = plan.apply_on_tape(&mut t, &xs, 0).unwrap();
        let (sv, pv) = (s.stacked(), p.stacked());
        for (k, &y) in t.value(v.view).data().iter().enumerate() {
            prop_assert!((y - (lambda * sv.data()[k] + (1.0 - lambda) * pv.data()[k])).abs() < 1e-12);
        }
    }
}
