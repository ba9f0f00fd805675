use std::sync::Arc;

use rand::Rng;

use super::{record_loss, Targets};
use crate::energy::{denoise_on_tape, EnergyOperator, OperatorVars};
use crate::error::Result;
use crate::model::{init_params, Bound, BoundModel, ModelConfig, ModelState, Params};
use crate::numerics::{grad_check, GradReport, RadialBands, Tape, Tensor, Var};
use crate::objective::LossConfig;
use crate::patching::{AugmentationPolicy, ViewPlan};
use crate::seed;

const SIDE: usize = 8;
const PATCH: usize = 4;
const BATCH: usize = 4;

/// A frozen small problem whose loss is a function of one flat vector
/// holding the encoder, the online heads and the operator parameters.
#[derive(Debug, Clone)]
pub struct FullPathCase {
    pub model: ModelState,
    pub operator: EnergyOperator,
    pub images: Vec<Tensor>,
    pub plans: Vec<(ViewPlan, ViewPlan)>,
    pub weights: Vec<Vec<f64>>,
    pub targets: Tensor,
    pub loss: LossConfig,
}

fn slice(t: &mut Tape, flat: Var, at: &mut usize, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    let s = t.slice_rows(flat, *at, n)?;
    *at += n;
    t.reshape(s, shape)
}

fn bind_slices(t: &mut Tape, flat: Var, at: &mut usize, params: &Params) -> Result<Bound> {
    let mut vars = Vec::with_capacity(params.len());
    for (n, p) in params.iter() {
        vars.push((n.to_string(), slice(t, flat, at, p.shape())?));
    }
    Ok(Bound { vars })
}

impl FullPathCase {
    pub fn new(seed_value: u64) -> Result<Self> {
        let config = ModelConfig {
            embed_dim: 6,
            out_dim: 4,
            conv_channels: vec![2, 2, 3],
            ..ModelConfig::default()
        };
        let m = (SIDE / PATCH) * (SIDE / PATCH);
        let model = init_params(seed::derive(seed_value, &[1]), &config, PATCH, m)?;
        let mut rng = seed::rng_at(seed_value, &[2]);
        let mut operator = EnergyOperator {
            gain_logits: (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ..EnergyOperator::default()
        };
        operator.bias = rng.gen_range(-0.5..0.5);
        let images: Vec<Tensor> = (0..BATCH)
            .map(|_| Tensor::new(&[SIDE, SIDE], (0..SIDE * SIDE).map(|_| rng.gen_range(0.0..1.0)).collect()))
            .collect::<Result<_>>()?;
        let policy = AugmentationPolicy {
            seed: seed_value,
            ..AugmentationPolicy::default()
        };
        let plans = (0..BATCH)
            .map(|i| {
                let a = ViewPlan::sample(&policy, &mut rng, SIDE, SIDE, BATCH, i);
                let b = ViewPlan::sample(&policy, &mut rng, SIDE, SIDE, BATCH, i);
                (a, b)
            })
            .collect();
        let weights = (0..BATCH)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.2..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|r| r / s).collect()
            })
            .collect();
        let targets = Tensor::new(
            &[BATCH, config.out_dim],
            (0..BATCH * config.out_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        Ok(Self {
            model,
            operator,
            images,
            plans,
            weights,
            targets,
            loss: LossConfig::default(),
        })
    }

    /// Encoder, online heads, gain logits, bias, deviation and variance
    /// weights, concatenated in that order.
    pub fn flat(&self) -> Tensor {
        let mut v = Vec::new();
        for p in [&self.model.encoder, &self.model.online] {
            for (_, t) in p.iter() {
                v.extend_from_slice(t.data());
            }
        }
        v.extend_from_slice(&self.operator.gain_logits);
        v.extend([self.operator.bias, self.operator.deviation_weight, self.operator.variance_weight]);
        Tensor::vector(v)
    }

    /// Pre-training loss of the batch with every parameter read from `flat`.
    pub fn loss_at(&self, t: &mut Tape, flat: Var) -> Result<Var> {
        let n = t.value(flat).len();
        let flat = t.reshape(flat, &[n, 1])?;
        let mut at = 0;
        let encoder = bind_slices(t, flat, &mut at, &self.model.encoder)?;
        let online = bind_slices(t, flat, &mut at, &self.model.online)?;
        let vars = OperatorVars {
            gain_logits: slice(t, flat, &mut at, &[self.operator.bands()])?,
            bias: slice(t, flat, &mut at, &[])?,
            deviation_weight: slice(t, flat, &mut at, &[])?,
            variance_weight: slice(t, flat, &mut at, &[])?,
        };
        let bound = BoundModel {
            encoder,
            online,
            momentum: self.model.momentum.bind(t, false),
            momentum_encoder: None,
        };
        let bands = Arc::new(RadialBands::new(SIDE, SIDE, self.operator.bands()));
        let mut samples = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let x = t.constant(img.clone());
            samples.push(denoise_on_tape(t, x, &vars, &bands, self.operator.threshold)?.sample);
        }
        let rec = record_loss(
            t,
            &self.model,
            &bound,
            &samples,
            &self.plans,
            &self.weights,
            &self.loss,
            Targets::Fixed(self.targets.clone()),
        )?;
        Ok(rec.terms.total)
    }
}

/// Central-difference check of every coordinate of [`FullPathCase::flat`].
pub fn full_path_check(seed_value: u64, step: f64, tolerance: f64) -> Result<GradReport> {
    let case = FullPathCase::new(seed_value)?;
    grad_check(|t, x| case.loss_at(t, x), &case.flat(), step, tolerance)
}
