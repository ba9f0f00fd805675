use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sherlock::model::{
    encode, forward_momentum, forward_online, init_params, Bound, EncoderVariant, ModelConfig, ModelState,
};
use sherlock::numerics::{grad_check, Tape, Tensor, Var};

fn config(variant: EncoderVariant) -> ModelConfig {
    ModelConfig {
        variant,
        embed_dim: 6,
        out_dim: 4,
        conv_channels: vec![2, 3, 3],
        vit_blocks: 1,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|r| r / s).collect()
}

/// `bound` with the tensor called `name` replaced by `x`.
fn swap(bound: &Bound, name: &str, x: Var) -> Bound {
    let mut b = bound.clone();
    for (n, v) in &mut b.vars {
        if n == name {
            *v = x;
        }
    }
    b
}

/// Random readout of the representations; keeps the loss small so
/// rounding stays below the check tolerance.
fn readout(t: &mut Tape, z: Var, r: &Tensor) -> sherlock::Result<Var> {
    let c = t.constant(r.clone());
    let m = t.mul(z, c)?;
    Ok(t.sum(m))
}

/// Nonzero biases so no ReLU input sits exactly at its kink.
fn jitter_biases(state: &mut ModelState, rng: &mut ChaCha8Rng) {
    for (n, p) in state.encoder.iter_mut() {
        if n.ends_with(".b") {
            for v in p.data_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
}

#[test]
fn conv_weight_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = config(EncoderVariant::ConvSmall);
    let mut state = init_params(3, &cfg, 4, 4).unwrap();
    jitter_biases(&mut state, &mut rng);
    let input = random(&mut rng, &[4, 2, 4, 4]);
    let r = random(&mut rng, &[4, 6]);
    for name in ["enc.conv0.w", "enc.conv2.w", "enc.conv3.b"] {
        let point = state.encoder.get(name).unwrap().clone();
        let report = grad_check(
            |t, x| {
                let b = swap(&state.encoder.bind(t, false), name, x);
                let xin = t.constant(input.clone());
                let z = encode(t, &cfg, &b, xin, 4)?;
                readout(t, z, &r)
            },
            &point,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{name}: {:e}", report.max_rel_error);
    }
}

#[test]
fn vit_encoder_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = config(EncoderVariant::VitTiny);
    let mut state = init_params(4, &cfg, 2, 4).unwrap();
    jitter_biases(&mut state, &mut rng);
    let input = random(&mut rng, &[8, 2, 2, 2]);
    let r = random(&mut rng, &[8, 6]);
    let report = grad_check(
        |t, x| {
            let b = state.encoder.bind(t, false);
            let z = encode(t, &cfg, &b, x, 4)?;
            readout(t, z, &r)
        },
        &input,
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed(), "{:e}", report.max_rel_error);
    let mut t = Tape::new();
    let b = state.encoder.bind(&mut t, false);
    let x = t.constant(input);
    let z = encode(&mut t, &cfg, &b, x, 4).unwrap();
    assert_eq!(t.shape(z), &[8, 6]);
}

#[test]
fn online_path_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = config(EncoderVariant::ConvSmall);
    let state = init_params(5, &cfg, 4, 3).unwrap();
    let z0 = random(&mut rng, &[6, 6]);
    let w: Vec<f64> = [simplex(&mut rng, 3), simplex(&mut rng, 3)].concat();
    let w = Arc::new(w);
    let readout = random(&mut rng, &[2, 4]);
    let loss = |t: &mut Tape, out: Var| {
        let r = t.constant(readout.clone());
        let m = t.mul(out, r)?;
        Ok(t.sum(m))
    };
    let r = grad_check(
        |t, z| {
            let bm = state.bind(t, false);
            let out = forward_online(t, &bm, z, w.clone(), 3)?;
            loss(t, out.prediction)
        },
        &z0,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(r.passed(), "wrt Z: {:e}", r.max_rel_error);
    for name in ["pat.w", "pro1.ln.g", "pro2.b", "pre0.w", "pre1.w"] {
        let point = state.online.get(name).unwrap().clone();
        let r = grad_check(
            |t, x| {
                let mut bm = state.bind(t, false);
                bm.online = swap(&bm.online, name, x);
                let z = t.constant(z0.clone());
                let out = forward_online(t, &bm, z, w.clone(), 3)?;
                loss(t, out.prediction)
            },
            &point,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{name}: {:e}", r.max_rel_error);
    }
}

#[test]
fn one_hot_weights_select_a_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = init_params(1, &config(EncoderVariant::ConvSmall), 4, 5).unwrap();
    let z0 = random(&mut rng, &[5, 6]);
    for j in 0..5 {
        let mut w = vec![0.0; 5];
        w[j] = 1.0;
        let mut t = Tape::new();
        let bm = state.bind(&mut t, false);
        let z = t.constant(z0.clone());
        let out = forward_online(&mut t, &bm, z, Arc::new(w), 5).unwrap();
        assert_eq!(t.value(out.pooled).data(), z0.row(j));
    }
}

#[test]
fn identical_rows_pool_to_that_row() {
    let row = [0.5, -1.0, 2.0, 0.0, 0.25, 3.0];
    let z0 = Tensor::new(&[4, 6], row.repeat(4)).unwrap();
    let state = init_params(2, &config(EncoderVariant::ConvSmall), 4, 4).unwrap();
    let mut t = Tape::new();
    let bm = state.bind(&mut t, false);
    let z = t.constant(z0);
    let out = forward_online(&mut t, &bm, z, Arc::new(vec![0.25; 4]), 4).unwrap();
    assert_eq!(t.value(out.pooled).data(), row);

    let single = t.constant(Tensor::new(&[1, 6], row.to_vec()).unwrap());
    let k_many = forward_momentum(&mut t, &bm, z, 4).unwrap();
    let k_one = forward_momentum(&mut t, &bm, single, 1).unwrap();
    assert_eq!(t.shape(k_many), &[1, 4]);
    assert!(t.value(k_many).max_abs_diff(t.value(k_one)) < 1e-12);
}

#[test]
fn momentum_equals_online_projection_when_heads_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut state = init_params(6, &config(EncoderVariant::ConvSmall), 4, 4).unwrap();
    // drift the online heads, then copy them over
    for (_, p) in state.online.iter_mut() {
        for v in p.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    state.momentum_update(0.0).unwrap();
    let z0 = random(&mut rng, &[8, 6]);
    let mut t = Tape::new();
    let bm = state.bind(&mut t, false);
    let z = t.constant(z0);
    let out = forward_online(&mut t, &bm, z, Arc::new(vec![0.25; 8]), 4).unwrap();
    let k = forward_momentum(&mut t, &bm, z, 4).unwrap();
    assert!(t.value(k).max_abs_diff(t.value(out.projection)) < 1e-12);
}

#[test]
fn momentum_parameters_never_receive_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cfg = config(EncoderVariant::ConvSmall);
    cfg.mirror_encoder = true;
    let state = init_params(7, &cfg, 4, 2).unwrap();
    let mut t = Tape::new();
    let bm = state.bind(&mut t, true);
    let x = t.constant(random(&mut rng, &[4, 2, 4, 4]));
    let z = encode(&mut t, &cfg, &bm.encoder, x, 2).unwrap();
    let zm = encode(&mut t, &cfg, bm.momentum_encoder.as_ref().unwrap(), x, 2).unwrap();
    let out = forward_online(&mut t, &bm, z, Arc::new(vec![0.5; 4]), 2).unwrap();
    let k = forward_momentum(&mut t, &bm, zm, 2).unwrap();
    let a = t.sum(out.prediction);
    let b = t.sum(k);
    let l = t.add(a, b).unwrap();
    let g = t.backward(l).unwrap();
    for (_, v) in bm.momentum.vars.iter().chain(&bm.momentum_encoder.as_ref().unwrap().vars) {
        assert!(g.try_get(*v).is_none());
    }
    assert!(bm.online.vars.iter().any(|(_, v)| g.try_get(*v).is_some()));
}

#[test]
fn output_width_does_not_depend_on_patch_count() {
    let cfg = config(EncoderVariant::ConvSmall);
    for m in [1, 4, 9] {
        let state = init_params(1, &cfg, 4, m).unwrap();
        let mut t = Tape::new();
        let bm = state.bind(&mut t, false);
        let z = t.constant(Tensor::filled(&[2 * m, 6], 0.3));
        let out = forward_online(&mut t, &bm, z, Arc::new(vec![1.0 / m as f64; 2 * m]), m).unwrap();
        assert_eq!(t.shape(out.prediction), &[2, 4]);
        assert_eq!(t.shape(out.projection), &[2, 4]);
    }
}

#[test]
fn wrong_weight_count_is_rejected() {
    let state = init_params(1, &config(EncoderVariant::ConvSmall), 4, 3).unwrap();
    let mut t = Tape::new();
    let bm = state.bind(&mut t, false);
    let z = t.constant(Tensor::zeros(&[3, 6]));
    assert!(forward_online(&mut t, &bm, z, Arc::new(vec![0.5; 2]), 3).is_err());
}

fn bounded_state(seed: u64, lo: f64, hi: f64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = init_params(seed, &config(EncoderVariant::ConvSmall), 4, 2).unwrap();
    for p in [&mut s.online, &mut s.momentum] {
        for (_, t) in p.iter_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(lo..=hi);
            }
        }
    }
    s
}

proptest! {
    #[test]
    fn ema_stays_inside_the_bounds(seed in 0u64..500, m in 0.0f64..=1.0, lo in -5.0f64..0.0, span in 0.0f64..5.0) {
        let hi = lo + span;
        let mut s = bounded_state(seed, lo, hi);
        for _ in 0..3 {
            s.momentum_update(m).unwrap();
        }
        for (_, t) in s.momentum.iter() {
            prop_assert!(t.data().iter().all(|&v| (lo..=hi).contains(&v)));
        }
    }

    #[test]
    fn pooling_is_linear_in_z(seed in 0u64..500, a in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = init_params(1, &config(EncoderVariant::ConvSmall), 4, 3).unwrap();
        let (z1, z2) = (random(&mut rng, &[3, 6]), random(&mut rng, &[3, 6]));
        let w = Arc::new(simplex(&mut rng, 3));
        let mut t = Tape::new();
        let bm = state.bind(&mut t, false);
        let mix = Tensor::new(&[3, 6], z1.data().iter().zip(z2.data()).map(|(x, y)| a * x + y).collect()).unwrap();
        let mut pooled = |z: Tensor| {
            let v = t.constant(z);
            let out = forward_online(&mut t, &bm, v, w.clone(), 3).unwrap();
            t.value(out.pooled).clone()
        };
        let (p1, p2, pm) = (pooled(z1), pooled(z2), pooled(mix));
        for i in 0..6 {
            prop_assert!((pm.data()[i] - (a * p1.data()[i] + p2.data()[i])).abs() < 1e-12);
        }
    }
}
