//! Operator training, pre-training, linear probing, evaluation, robustness
//! sweeps and ablations.

mod eval;
mod gradcheck;
mod sweep;
mod train;

use std::sync::Arc;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::energy::{apply_operator, passthrough, DenoisedSample, EnergyOperator};
use crate::error::{Error, Result};
use crate::matching::uniform_weights;
use crate::model::{encode, forward_momentum, forward_online, init_params, BoundModel, ModelState};
use crate::numerics::{Tape, Tensor, Var};
use crate::objective::{combined_loss, Adam, LossConfig, LossTerms};
use crate::patching::{patch_map, ViewPlan};
use crate::seed;

pub use eval::{embed_images, evaluate, finetune, fit_probe, score_logits, score_set, EvalReport, EvalRow, LabeledSet, Metrics, Probe};
pub use gradcheck::{full_path_check, FullPathCase};
pub use sweep::{ablate, default_cases, perturb_test_pages, robustness_sweep, run_once, AblationCase, AblationReport, AblationRow, RunOutcome, SweepKind};
pub use train::{pretrain, pretrain_from, EpochLog, PretrainOutcome};

/// Seed-derivation tags.
pub(crate) mod tag {
    pub const MODEL: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const VIEWS: u64 = 3;
    pub const WARMUP: u64 = 4;
    pub const SWEEP: u64 = 5;
}

/// Everything that changes during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelState,
    pub operator: EnergyOperator,
    pub adam: Adam,
    pub height: usize,
    pub width: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub warmed_up: bool,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: &RunConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        crate::patching::check_patch_size(height, width, config.patch)?;
        let m = height * width / (config.patch * config.patch);
        let model = init_params(seed::derive(config.seed, &[tag::MODEL]), &config.model, config.patch, m)?;
        let adam = Adam::new(&[&model.encoder, &model.online]);
        Ok(Self {
            model,
            operator: config.operator.clone(),
            adam,
            height,
            width,
            epoch: 0,
            warmed_up: false,
            seed: config.seed,
        })
    }

    /// Denoised sample under the run's operator toggle.
    pub fn denoise(&self, image: &Tensor, enabled: bool, source: Option<usize>) -> Result<DenoisedSample> {
        if enabled {
            apply_operator(image, &self.operator, source)
        } else {
            Ok(passthrough(image, source))
        }
    }

    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        let mut c = Checkpoint::new(config.digest());
        let dims = [self.height, self.width, self.model.patch, self.model.patches];
        c.push("dims", &Tensor::vector(dims.iter().map(|&d| d as f64).collect()));
        c.push_params("encoder", &self.model.encoder);
        c.push_params("online-heads", &self.model.online);
        c.push_params("momentum-heads", &self.model.momentum);
        if let Some(me) = &self.model.momentum_encoder {
            c.push_params("momentum-encoder", me);
        }
        c.push("operator/gain_logits", &Tensor::vector(self.operator.gain_logits.clone()));
        c.push(
            "operator/calibration",
            &Tensor::vector(vec![
                self.operator.bias,
                self.operator.deviation_weight,
                self.operator.variance_weight,
            ]),
        );
        c.push("optimizer-moments/step", &Tensor::vector(vec![self.adam.step as f64]));
        c.push_params("optimizer-moments/first", &self.adam.first);
        c.push_params("optimizer-moments/second", &self.adam.second);
        // u64 seed split into exactly representable halves
        c.push(
            "rng-state",
            &Tensor::vector(vec![
                (self.seed & 0xffff_ffff) as f64,
                (self.seed >> 32) as f64,
                self.epoch as f64,
                if self.warmed_up { 1.0 } else { 0.0 },
            ]),
        );
        c
    }

    pub fn from_checkpoint(c: &Checkpoint, config: &RunConfig) -> Result<Self> {
        let dims: Vec<usize> = c.get("dims")?.data().iter().map(|&d| d as usize).collect();
        let [height, width, patch, patches] = dims[..] else {
            return Err(Error::Format("dims section must hold four entries".into()));
        };
        let mut model = init_params(0, &config.model, patch, patches)?;
        let fill = |target: &mut crate::model::Params, prefix: &str| -> Result<()> {
            let stored = c.params(prefix)?;
            if stored.len() != target.len() {
                return Err(Error::Format(format!(
                    "checkpoint section {prefix} holds {} tensors, the model expects {}",
                    stored.len(),
                    target.len()
                )));
            }
            for (n, t) in target.iter_mut() {
                let s = stored
                    .get(n)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}/{n}")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Format(format!("checkpoint {prefix}/{n} has shape {:?}", s.shape())));
                }
                *t = s.clone();
            }
            Ok(())
        };
        fill(&mut model.encoder, "encoder")?;
        fill(&mut model.online, "online-heads")?;
        fill(&mut model.momentum, "momentum-heads")?;
        if let Some(me) = &mut model.momentum_encoder {
            fill(me, "momentum-encoder")?;
        }
        let operator = load_operator(c, &config.operator)?;
        let mut adam = Adam::new(&[&model.encoder, &model.online]);
        adam.step = c.get("optimizer-moments/step")?.item() as u64;
        fill(&mut adam.first, "optimizer-moments/first")?;
        fill(&mut adam.second, "optimizer-moments/second")?;
        let rng = c.get("rng-state")?;
        if rng.len() != 4 {
            return Err(Error::Format("rng-state must hold four values".into()));
        }
        let r = rng.data();
        Ok(Self {
            model,
            operator,
            adam,
            height,
            width,
            seed: (r[0] as u64) | ((r[1] as u64) << 32),
            epoch: r[2] as usize,
            warmed_up: r[3] != 0.0,
        })
    }
}

/// Operator stored in a checkpoint; fields the checkpoint does not carry
/// come from `base`.
pub fn load_operator(c: &Checkpoint, base: &EnergyOperator) -> Result<EnergyOperator> {
    let mut operator = base.clone();
    operator.gain_logits = c.get("operator/gain_logits")?.into_data();
    let cal = c.get("operator/calibration")?;
    if cal.len() != 3 {
        return Err(Error::Format("operator/calibration must hold three values".into()));
    }
    (operator.bias, operator.deviation_weight, operator.variance_weight) = (cal.data()[0], cal.data()[1], cal.data()[2]);
    operator.validate()?;
    Ok(operator)
}

/// Where the positives of the contrastive terms come from.
#[derive(Debug, Clone)]
pub enum Targets {
    /// Momentum branch on the second view, gradient-stopped.
    Momentum,
    /// Precomputed embeddings.
    Fixed(Tensor),
    /// Online projection of the second view, with gradient.
    Online,
}

pub struct Recorded {
    pub terms: LossTerms,
    /// Patch representations of the first views, `[B·M, d]`.
    pub representations: Var,
    pub clamped: usize,
}

fn flat_weights(weights: &[Vec<f64>], m: usize) -> Result<Arc<Vec<f64>>> {
    if weights.iter().any(|w| w.len() != m) {
        return Err(Error::invalid(format!("every sample needs {m} patch weights")));
    }
    Ok(Arc::new(weights.concat()))
}

/// Views of every sample, split into patches and stacked to `[B·M, 2, P, P]`.
fn patched_views(
    t: &mut Tape,
    model: &ModelState,
    samples: &[Var],
    plans: &[&ViewPlan],
) -> Result<(Var, Vec<Var>, usize)> {
    let (h, w) = match t.shape(samples[0]) {
        [2, h, w] => (*h, *w),
        s => return Err(Error::invalid(format!("samples must be [2, H, W], got {s:?}"))),
    };
    let map = patch_map(h, w, model.patch)?;
    let mut clamped = 0;
    let mut views = Vec::with_capacity(samples.len());
    let mut parts = Vec::with_capacity(samples.len());
    for (i, plan) in plans.iter().enumerate() {
        let v = plan.apply_on_tape(t, samples, i)?;
        clamped += v.clamped;
        views.push(v.view);
        parts.push(t.sparse(v.view, map.clone())?);
    }
    Ok((t.concat(&parts)?, views, clamped))
}

/// Momentum-branch embeddings of `[2, H, W]` views, computed off-tape.
pub fn momentum_targets(model: &ModelState, views: &[Tensor]) -> Result<Tensor> {
    let mut t = Tape::new();
    let bound = model.bind(&mut t, false);
    let (h, w) = (views[0].shape()[1], views[0].shape()[2]);
    let map = patch_map(h, w, model.patch)?;
    let mut parts = Vec::with_capacity(views.len());
    for v in views {
        let x = t.constant(v.clone());
        parts.push(t.sparse(x, map.clone())?);
    }
    let x = t.concat(&parts)?;
    let enc = bound.momentum_encoder.as_ref().unwrap_or(&bound.encoder);
    let z = encode(&mut t, &model.config, enc, x, model.patches)?;
    let k = forward_momentum(&mut t, &bound, z, model.patches)?;
    Ok(t.value(k).clone())
}

/// Records the pre-training loss of one batch on `t`.
#[allow(clippy::too_many_arguments)]
pub fn record_loss(
    t: &mut Tape,
    model: &ModelState,
    bound: &BoundModel,
    samples: &[Var],
    plans: &[(ViewPlan, ViewPlan)],
    weights: &[Vec<f64>],
    loss: &LossConfig,
    targets: Targets,
) -> Result<Recorded> {
    if samples.len() != plans.len() || samples.len() != weights.len() || samples.is_empty() {
        return Err(Error::invalid("samples, view plans and weights must align"));
    }
    let m = model.patches;
    let first: Vec<&ViewPlan> = plans.iter().map(|p| &p.0).collect();
    let second: Vec<&ViewPlan> = plans.iter().map(|p| &p.1).collect();
    let (x1, _, mut clamped) = patched_views(t, model, samples, &first)?;
    let z = encode(t, &model.config, &bound.encoder, x1, m)?;
    let w = flat_weights(weights, m)?;
    let online = forward_online(t, bound, z, w.clone(), m)?;
    let positives = match targets {
        Targets::Fixed(k) => t.constant(k),
        Targets::Momentum => {
            let (_, views, c) = patched_views(t, model, samples, &second)?;
            clamped += c;
            let values: Vec<Tensor> = views.iter().map(|&v| t.value(v).clone()).collect();
            let k = momentum_targets(model, &values)?;
            t.constant(k)
        }
        Targets::Online => {
            let (x2, _, c) = patched_views(t, model, samples, &second)?;
            clamped += c;
            let z2 = encode(t, &model.config, &bound.encoder, x2, m)?;
            forward_online(t, bound, z2, w, m)?.projection
        }
    };
    let terms = combined_loss(t, online.prediction, online.projection, positives, loss)?;
    Ok(Recorded {
        terms,
        representations: z,
        clamped,
    })
}

/// Loss settings after applying the two-branch toggle.
pub fn effective_loss(config: &RunConfig) -> LossConfig {
    let mut l = config.loss.clone();
    if !config.toggles.two_branch {
        l.lambda_mo = 0.0;
    }
    l
}

pub fn target_mode(config: &RunConfig) -> Targets {
    if config.toggles.two_branch {
        Targets::Momentum
    } else {
        Targets::Online
    }
}

pub(crate) fn uniform_for(m: usize, n: usize) -> Result<Vec<Vec<f64>>> {
    let u = uniform_weights(m)?;
    Ok(vec![u; n])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
