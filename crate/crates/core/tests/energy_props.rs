use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sherlock::corpus::{damage_image, render_with_ink, sample_writer, DamageKind};
use sherlock::energy::{
    apply_operator, energy_map, operator_objective, spectral_filter, update_operator, EnergyOperator, BANDS, LOGIT_CAP,
};
use sherlock::numerics::{grad_check, RadialBands, Tape, Tensor, Var};
use sherlock::Result;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::new(&[h, w], (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Stand-in for a frozen model's loss: a fixed quadratic readout of both
/// sample channels.
fn toy_loss(t: &mut Tape, samples: &[Var]) -> Result<Var> {
    let mut acc = None;
    for (i, &s) in samples.iter().enumerate() {
        let n = t.value(s).len();
        let shape = t.shape(s).to_vec();
        let r = t.constant(Tensor::new(&shape, (0..n).map(|k| ((k + 3 * i) as f64 * 0.7).sin()).collect())?);
        let p = t.mul(s, r)?;
        let q = t.square(p);
        let m = t.mean(q);
        acc = Some(match acc {
            Some(a) => t.add(a, m)?,
            None => m,
        });
    }
    Ok(acc.unwrap())
}

#[test]
fn sinusoid_survives_its_own_band() {
    let (h, w) = (32, 32);
    // vertical frequency 0, horizontal frequency 5 cycles per width
    let k = 5usize;
    let x = Tensor::new(
        &[h, w],
        (0..h * w).map(|i| 0.5 + 0.3 * (2.0 * PI * k as f64 * (i % w) as f64 / w as f64).cos()).collect(),
    )
    .unwrap();
    let bands = RadialBands::new(h, w, BANDS);
    let band = bands.band_of(0, k);
    let mut logits = vec![-LOGIT_CAP; BANDS];
    logits[band] = LOGIT_CAP;
    let op = EnergyOperator {
        gain_logits: logits,
        ..Default::default()
    };
    let y = spectral_filter(&x, &op).unwrap();
    let m = x.mean();
    let e_in: f64 = x.data().iter().map(|v| (v - m).powi(2)).sum();
    let e_out: f64 = y.data().iter().map(|v| (v - m).powi(2)).sum();
    assert!(e_out / e_in >= 0.99, "{}", e_out / e_in);
    assert!(y.max_abs_diff(&x) < 1e-8);
}

#[test]
fn strokes_carry_more_energy_than_paper() {
    let r = render_with_ink(&sample_writer(4), 4, 64, 64).unwrap();
    let img = r.page.image.to_unit();
    let op = EnergyOperator::default();
    let e = energy_map(&spectral_filter(&img, &op).unwrap(), &op).unwrap();
    let ink = r.ink_mask();
    let mean = |want: bool| {
        let v: Vec<f64> = e.data().iter().zip(&ink).filter(|(_, &m)| m == want).map(|(v, _)| *v).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false));
}

#[test]
fn stains_are_suppressed_more_than_ink() {
    let kinds: BTreeSet<DamageKind> = [DamageKind::Stain].into_iter().collect();
    let op = EnergyOperator::default();
    for s in 0..5u64 {
        let r = render_with_ink(&sample_writer(s + 30), s, 64, 64).unwrap();
        let d = damage_image(&r.page.image, &kinds, 0.3, s).unwrap();
        let out = apply_operator(&d.image.to_unit(), &op, None).unwrap();
        let ink = r.ink_mask();
        let survive = |sel: &dyn Fn(usize) -> bool| {
            let idx: Vec<usize> = (0..ink.len()).filter(|&i| sel(i)).collect();
            idx.iter().filter(|&&i| out.energy.data()[i] >= op.threshold).count() as f64 / idx.len() as f64
        };
        let stain = survive(&|i| d.altered[i] && !ink[i]);
        let strokes = survive(&|i| ink[i] && !d.altered[i]);
        assert!(stain < strokes, "seed {s}: stain {stain} vs ink {strokes}");
    }
}

#[test]
fn objective_without_regularizers_is_the_model_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let imgs = vec![random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8)];
    let op = EnergyOperator {
        smoothness: 0.0,
        fidelity: 0.0,
        ..Default::default()
    };
    let full = operator_objective(&op, &imgs, toy_loss).unwrap().value;
    let mut t = Tape::new();
    let samples: Vec<Var> = imgs
        .iter()
        .map(|i| {
            let s = apply_operator(i, &op, None).unwrap();
            t.constant(s.stacked())
        })
        .collect();
    let l = toy_loss(&mut t, &samples).unwrap();
    assert!((full - t.value(l).item()).abs() < 1e-12);
}

fn objective_at(params: &Tensor, imgs: &[Tensor]) -> f64 {
    let p = params.data();
    let op = EnergyOperator {
        gain_logits: p[..BANDS].to_vec(),
        bias: p[BANDS],
        deviation_weight: p[BANDS + 1],
        variance_weight: p[BANDS + 2],
        ..Default::default()
    };
    operator_objective(&op, imgs, toy_loss).unwrap().value
}

#[test]
fn operator_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs = vec![random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8)];
    let op = EnergyOperator {
        gain_logits: (0..BANDS).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        bias: -1.0,
        deviation_weight: 2.0,
        variance_weight: 3.0,
        ..Default::default()
    };
    let eval = operator_objective(&op, &imgs, toy_loss).unwrap();
    let mut point: Vec<f64> = op.gain_logits.clone();
    point.extend([op.bias, op.deviation_weight, op.variance_weight]);
    let mut analytic = eval.grads.gain_logits.clone();
    analytic.extend([eval.grads.bias, eval.grads.deviation_weight, eval.grads.variance_weight]);
    let base = Tensor::vector(point);
    let step = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut hi = base.clone();
        hi.data_mut()[i] += step;
        let mut lo = base.clone();
        lo.data_mut()[i] -= step;
        let num = (objective_at(&hi, &imgs) - objective_at(&lo, &imgs)) / (2.0 * step);
        let rel = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn small_steps_do_not_increase_the_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let imgs = vec![random_image(&mut rng, 8, 8), random_image(&mut rng, 8, 8)];
    let mut op = EnergyOperator {
        bias: -1.0,
        deviation_weight: 2.0,
        variance_weight: 3.0,
        ..Default::default()
    };
    let mut prev = operator_objective(&op, &imgs, toy_loss).unwrap().value;
    for _ in 0..5 {
        op = update_operator(&op, &imgs, toy_loss, 1e-3).unwrap().operator;
        let now = operator_objective(&op, &imgs, toy_loss).unwrap().value;
        assert!(now <= prev + 1e-12, "{now} > {prev}");
        prev = now;
    }
}

#[test]
fn kept_pixels_stay_kept_under_all_pass_deviation_head() {
    let op = EnergyOperator {
        gain_logits: vec![LOGIT_CAP; BANDS],
        variance_weight: 0.0,
        ..Default::default()
    };
    for s in 0..10u64 {
        let img = render_with_ink(&sample_writer(s), s, 64, 64).unwrap().page.image.to_unit();
        let first = apply_operator(&img, &op, None).unwrap();
        let second = apply_operator(&first.intensity, &op, None).unwrap();
        for i in 0..img.len() {
            if first.energy.data()[i] >= op.threshold {
                assert!(second.energy.data()[i] >= op.threshold, "seed {s} pixel {i}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn filter_is_linear_and_keeps_the_mean(seed in any::<u64>(), a in -2.0f64..2.0, h in 2usize..12, w in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = EnergyOperator {
            gain_logits: (0..BANDS).map(|_| rng.gen_range(-4.0..4.0)).collect(),
            ..Default::default()
        };
        let x = random_image(&mut rng, h, w);
        let y = random_image(&mut rng, h, w);
        let combo = Tensor::new(&[h, w], x.data().iter().zip(y.data()).map(|(p, q)| a * p + q).collect()).unwrap();
        let fx = spectral_filter(&x, &op).unwrap();
        let fy = spectral_filter(&y, &op).unwrap();
        let fc = spectral_filter(&combo, &op).unwrap();
        for i in 0..h * w {
            prop_assert!((fc.data()[i] - a * fx.data()[i] - fy.data()[i]).abs() < 1e-10);
        }
        prop_assert!((fx.mean() - x.mean()).abs() < 1e-12);
    }

    #[test]
    fn energy_and_intensity_stay_in_unit_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let op = EnergyOperator {
            gain_logits: (0..BANDS).map(|_| rng.gen_range(-6.0..6.0)).collect(),
            bias: rng.gen_range(-8.0..8.0),
            deviation_weight: rng.gen_range(-20.0..20.0),
            variance_weight: rng.gen_range(-20.0..20.0),
            threshold: rng.gen_range(0.0..1.0),
            ..Default::default()
        };
        let s = apply_operator(&random_image(&mut rng, 16, 16), &op, None).unwrap();
        prop_assert!(s.energy.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(s.intensity.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gains_stay_in_open_unit_interval_after_updates(seed in any::<u64>(), rate in 0.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs = vec![random_image(&mut rng, 8, 8)];
        let op = EnergyOperator {
            gain_logits: (0..BANDS).map(|_| rng.gen_range(-29.0..29.0)).collect(),
            ..Default::default()
        };
        let next = update_operator(&op, &imgs, toy_loss, rate).unwrap().operator;
        prop_assert!(next.gains().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn spectral_gain_gradient_matches_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut rng, 8, 8);
        let bands = std::sync::Arc::new(RadialBands::new(8, 8, BANDS));
        let point = Tensor::vector((0..BANDS).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let rep = grad_check(
            |t, logits| {
                let x = t.constant(img.clone());
                let g = t.sigmoid(logits);
                let y = t.spectral_filter(x, g, bands.clone())?;
                let sq = t.square(y);
                Ok(t.mean(sq))
            },
            &point,
            1e-6,
            1e-5,
        )
        .unwrap();
        prop_assert!(rep.passed(), "{}", rep.max_rel_error);
    }
}
