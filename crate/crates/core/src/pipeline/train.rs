use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::{effective_loss, record_loss, tag, target_mode, uniform_for, TrainState};
use crate::config::RunConfig;
use crate::corpus::{Corpus, Split};
use crate::energy::{update_operator, DenoisedSample};
use crate::error::{Error, Result};
use crate::matching::{patch_importance, WeightState};
use crate::numerics::{Tape, Tensor, Var};
use crate::objective::Adam;
use crate::patching::{patch_energy_scores, split_patches, ViewPlan};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub contrastive: f64,
    pub momentum: f64,
    pub clamped: usize,
    /// Mean operator objective over the epoch's operator steps.
    pub operator_objective: Option<f64>,
    pub removed_patches: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    pub diagnostics: Vec<String>,
}

struct PageSet {
    ids: Vec<usize>,
    images: Vec<Tensor>,
}

fn pretrain_pages(corpus: &Corpus) -> Result<PageSet> {
    let pages: Vec<_> = corpus.split(Split::Pretrain).collect();
    if pages.is_empty() {
        return Err(Error::invalid("the corpus has no pretrain pages"));
    }
    Ok(PageSet {
        ids: pages.iter().map(|p| p.id).collect(),
        images: pages.iter().map(|p| p.page.image.to_unit()).collect(),
    })
}

/// Shuffled batches of positions; a trailing singleton joins the previous
/// batch.
fn batches(n: usize, size: usize, master: u64, path: &[u64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_at(master, path));
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

fn view_plans(config: &RunConfig, state: &TrainState, ids: &[usize], path: &[u64]) -> Vec<(ViewPlan, ViewPlan)> {
    let master = seed::derive(config.augment.seed, &[config.seed, tag::VIEWS]);
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            let mut p = path.to_vec();
            p.push(id as u64);
            let mut rng = seed::rng_at(master, &p);
            let a = ViewPlan::sample(&config.augment, &mut rng, state.height, state.width, ids.len(), i);
            let b = ViewPlan::sample(&config.augment, &mut rng, state.height, state.width, ids.len(), i);
            (a, b)
        })
        .collect()
}

fn denoise_batch(state: &TrainState, config: &RunConfig, images: &[&Tensor]) -> Result<Vec<DenoisedSample>> {
    images
        .par_iter()
        .map(|img| state.denoise(img, config.toggles.energy_operator, None))
        .collect()
}

fn operator_step(
    state: &mut TrainState,
    config: &RunConfig,
    images: &[Tensor],
    plans: &[(ViewPlan, ViewPlan)],
    weights: &[Vec<f64>],
    diagnostics: &mut Vec<String>,
) -> Result<f64> {
    let loss = effective_loss(config);
    let model = &state.model;
    let closure = |t: &mut Tape, samples: &[Var]| {
        let bound = model.bind(t, false);
        Ok(record_loss(t, model, &bound, samples, plans, weights, &loss, target_mode(config))?.terms.total)
    };
    let upd = update_operator(&state.operator, images, closure, config.schedule.operator_rate)?;
    if let Some(d) = upd.diagnostic {
        diagnostics.push(format!("epoch {}: {d}", state.epoch));
    }
    state.operator = upd.operator;
    Ok(upd.objective)
}

fn warm_up(state: &mut TrainState, config: &RunConfig, pages: &PageSet, diagnostics: &mut Vec<String>) -> Result<()> {
    if state.warmed_up || !config.toggles.energy_operator || config.schedule.operator_warmup_epochs == 0 {
        state.warmed_up = true;
        return Ok(());
    }
    let m = state.model.patches;
    for e in 0..config.schedule.operator_warmup_epochs {
        for (b, batch) in batches(pages.ids.len(), config.schedule.batch_size, config.seed, &[tag::WARMUP, e as u64])
            .into_iter()
            .enumerate()
        {
            let ids: Vec<usize> = batch.iter().map(|&i| pages.ids[i]).collect();
            let images: Vec<Tensor> = batch.iter().map(|&i| pages.images[i].clone()).collect();
            let plans = view_plans(config, state, &ids, &[tag::WARMUP, e as u64, b as u64]);
            let weights = uniform_for(m, ids.len())?;
            operator_step(state, config, &images, &plans, &weights, diagnostics)?;
        }
    }
    state.warmed_up = true;
    Ok(())
}

pub fn pretrain(config: &RunConfig, corpus: &Corpus) -> Result<PretrainOutcome> {
    let state = TrainState::new(config, corpus.config.height, corpus.config.width)?;
    pretrain_from(config, corpus, state, |_, _| Ok(()))
}

/// Continues training `state` until `config.schedule.epochs` epochs are
/// complete, calling `on_epoch` after each one.
pub fn pretrain_from<F>(config: &RunConfig, corpus: &Corpus, mut state: TrainState, mut on_epoch: F) -> Result<PretrainOutcome>
where
    F: FnMut(&TrainState, &EpochLog) -> Result<()>,
{
    config.validate()?;
    if (state.height, state.width) != (corpus.config.height, corpus.config.width) {
        return Err(Error::invalid(format!(
            "state built for {}×{} pages, corpus has {}×{}",
            state.height, state.width, corpus.config.height, corpus.config.width
        )));
    }
    let pages = pretrain_pages(corpus)?;
    let mut diagnostics = Vec::new();
    let mut history = Vec::new();
    let m = state.model.patches;
    let p = state.model.patch;
    let loss_cfg = effective_loss(config);
    let adaptive = config.toggles.adaptive_matching;
    let mc = &config.matching;
    let mut weight_states: Vec<Option<WeightState>> = vec![None; pages.ids.len()];
    let mut global_step = state.epoch * batches(pages.ids.len(), config.schedule.batch_size, 0, &[]).len();

    if state.epoch < config.schedule.epochs {
        warm_up(&mut state, config, &pages, &mut diagnostics)?;
    }
    while state.epoch < config.schedule.epochs {
        let e = state.epoch as u64;
        let mut sums = (0.0, 0.0, 0.0);
        let mut clamped = 0;
        let mut op_values = Vec::new();
        let epoch_batches = batches(pages.ids.len(), config.schedule.batch_size, config.seed, &[tag::SHUFFLE, e]);
        let n_batches = epoch_batches.len();
        for (b, batch) in epoch_batches.into_iter().enumerate() {
            global_step += 1;
            let ids: Vec<usize> = batch.iter().map(|&i| pages.ids[i]).collect();
            let images: Vec<&Tensor> = batch.iter().map(|&i| &pages.images[i]).collect();
            let plans = view_plans(config, &state, &ids, &[tag::SHUFFLE, e, b as u64]);
            let denoised = denoise_batch(&state, config, &images)?;

            let weights: Vec<Vec<f64>> = if adaptive {
                batch
                    .iter()
                    .zip(&denoised)
                    .map(|(&i, d)| {
                        if weight_states[i].is_none() {
                            let mut ws = WeightState::new(m)?.with_limits(mc.removal_cap, mc.t_max);
                            ws.energy_reweight(&patch_energy_scores(&split_patches(d, p)?))?;
                            weight_states[i] = Some(ws);
                        }
                        Ok(weight_states[i].as_ref().unwrap().finalize())
                    })
                    .collect::<Result<_>>()?
            } else {
                uniform_for(m, batch.len())?
            };

            let mut t = Tape::new();
            let bound = state.model.bind(&mut t, true);
            let samples: Vec<Var> = denoised.iter().map(|d| t.constant(d.stacked())).collect();
            let rec = record_loss(&mut t, &state.model, &bound, &samples, &plans, &weights, &loss_cfg, target_mode(config))?;
            let value = t.value(rec.terms.total).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {} batch {b}", state.epoch + 1)));
            }
            sums.0 += value;
            sums.1 += t.value(rec.terms.contrastive).item();
            sums.2 += t.value(rec.terms.momentum).item();
            clamped += rec.clamped;
            let g = t.backward(rec.terms.total)?;
            let ge = Adam::collect(&g, &bound.encoder, &state.model.encoder);
            let go = Adam::collect(&g, &bound.online, &state.model.online);
            let outcome = state.adam.apply(
                &mut [&mut state.model.encoder, &mut state.model.online],
                &[&ge, &go],
                &config.loss,
            )?;
            if let Some(d) = outcome.diagnostic {
                diagnostics.push(format!("epoch {} batch {b}: {d}", state.epoch + 1));
            }
            if config.toggles.two_branch {
                state.model.momentum_update(config.model.ema)?;
            }
            if !state.model.is_finite() {
                return Err(Error::Numerical(format!("non-finite parameters after epoch {} batch {b}", state.epoch + 1)));
            }

            if adaptive && (global_step.is_multiple_of(mc.boost_every) || global_step.is_multiple_of(mc.prune_every)) {
                let grad = g.get(rec.representations);
                for (k, &i) in batch.iter().enumerate() {
                    let rows = Tensor::new(&[m, grad.row_len()], grad.data()[k * m * grad.row_len()..(k + 1) * m * grad.row_len()].to_vec())?;
                    let ws = weight_states[i].as_mut().expect("state created above");
                    if global_step.is_multiple_of(mc.boost_every) {
                        ws.gradient_boost(&patch_importance(&rows), mc.gamma, mc.top, mc.boost_steps, mc.mode)?;
                    }
                    if global_step.is_multiple_of(mc.prune_every) {
                        ws.prune_stale();
                    }
                }
            }

            if config.toggles.energy_operator && global_step.is_multiple_of(config.schedule.operator_every) {
                let owned: Vec<Tensor> = images.iter().map(|&i| i.clone()).collect();
                op_values.push(operator_step(&mut state, config, &owned, &plans, &weights, &mut diagnostics)?);
            }
        }
        state.epoch += 1;
        let n = n_batches as f64;
        let log = EpochLog {
            epoch: state.epoch,
            loss: sums.0 / n,
            contrastive: sums.1 / n,
            momentum: sums.2 / n,
            clamped,
            operator_objective: (!op_values.is_empty()).then(|| op_values.iter().sum::<f64>() / op_values.len() as f64),
            removed_patches: weight_states.iter().flatten().map(|w| w.removed_count()).sum(),
        };
        on_epoch(&state, &log)?;
        history.push(log);
    }
    Ok(PretrainOutcome {
        state,
        history,
        diagnostics,
    })
}
