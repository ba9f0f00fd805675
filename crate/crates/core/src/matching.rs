//! Per-patch weights for the contrastive branch: energy reweighting,
//! gradient boosts, pruning of stale patches and the final blend with the
//! energy snapshot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SCORE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoostMode {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Boost cadence in training steps.
    pub boost_every: usize,
    /// Prune cadence in training steps.
    pub prune_every: usize,
    /// Boost repetitions per invocation.
    pub boost_steps: usize,
    pub gamma: f64,
    pub top: usize,
    pub mode: BoostMode,
    pub removal_cap: f64,
    pub t_max: usize,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            boost_every: 10,
            prune_every: 20,
            boost_steps: 3,
            gamma: 0.02,
            top: 10,
            mode: BoostMode::Additive,
            removal_cap: 0.5,
            t_max: 200,
        }
    }
}

impl MatchingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.boost_every == 0 || self.prune_every == 0 {
            return Err(Error::invalid("matching.boost_every and matching.prune_every must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("matching.gamma must be a nonnegative number"));
        }
        if !(0.0..=1.0).contains(&self.removal_cap) {
            return Err(Error::invalid("matching.removal_cap must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    weights: Vec<f64>,
    original: Vec<f64>,
    changes: Option<Vec<f64>>,
    removed: Vec<bool>,
    invocations: usize,
    pub removal_cap: f64,
    pub t_max: usize,
}

fn normalize_active(w: &mut [f64], removed: &[bool]) {
    let s: f64 = w.iter().zip(removed).filter(|(_, &r)| !r).map(|(v, _)| v).sum();
    for (v, &r) in w.iter_mut().zip(removed) {
        *v = if r { 0.0 } else { *v / s };
    }
}

/// Indices of the `k` largest values among `eligible`, ties to the lower index.
fn top_k(values: &[f64], eligible: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| eligible[i]).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl WeightState {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("weight state needs at least one patch"));
        }
        let defaults = MatchingConfig::default();
        let w = uniform_weights(m)?;
        Ok(Self {
            weights: w.clone(),
            original: w,
            changes: None,
            removed: vec![false; m],
            invocations: 0,
            removal_cap: defaults.removal_cap,
            t_max: defaults.t_max,
        })
    }

    pub fn with_limits(mut self, removal_cap: f64, t_max: usize) -> Self {
        self.removal_cap = removal_cap;
        self.t_max = t_max;
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn original(&self) -> &[f64] {
        &self.original
    }

    pub fn removed(&self) -> &[bool] {
        &self.removed
    }

    pub fn removed_count(&self) -> usize {
        self.removed.iter().filter(|&&r| r).count()
    }

    pub fn invocations(&self) -> usize {
        self.invocations
    }

    pub fn changes(&self) -> Option<&[f64]> {
        self.changes.as_deref()
    }

    /// Overwrites the change window, e.g. when restoring a state.
    pub fn record_changes(&mut self, changes: Vec<f64>) -> Result<()> {
        if changes.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} changes for {} patches",
                changes.len(),
                self.len()
            )));
        }
        self.changes = Some(changes);
        Ok(())
    }

    fn active(&self) -> Vec<bool> {
        self.removed.iter().map(|r| !r).collect()
    }

    /// Weights proportional to `scores + ε`, also stored as the snapshot.
    pub fn energy_reweight(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.len() {
            return Err(Error::invalid(format!("{} scores for {} patches", scores.len(), self.len())));
        }
        if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("energy scores must be finite and nonnegative"));
        }
        let mut w: Vec<f64> = scores.iter().map(|s| s + SCORE_FLOOR).collect();
        normalize_active(&mut w, &self.removed);
        self.original = w.clone();
        self.weights = w;
        Ok(())
    }

    /// `steps` rounds of boosting the `top` most important active patches.
    pub fn gradient_boost(&mut self, importance: &[f64], gamma: f64, top: usize, steps: usize, mode: BoostMode) -> Result<()> {
        if importance.len() != self.len() {
            return Err(Error::invalid(format!(
                "{} importance values for {} patches",
                importance.len(),
                self.len()
            )));
        }
        if importance.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite patch importance".into()));
        }
        self.invocations += 1;
        let active = self.active();
        let n_active = active.iter().filter(|&&a| a).count();
        if gamma == 0.0 || steps == 0 || top == 0 || top >= n_active {
            // boosting every active patch by the same amount cancels out
            return Ok(());
        }
        let chosen = top_k(importance, &active, top);
        let before = self.weights.clone();
        for _ in 0..steps {
            for &i in &chosen {
                match mode {
                    BoostMode::Additive => self.weights[i] += gamma,
                    BoostMode::Multiplicative => self.weights[i] *= 1.0 + gamma,
                }
            }
            normalize_active(&mut self.weights, &self.removed);
        }
        self.changes = Some(self.weights.iter().zip(&before).map(|(a, b)| (a - b).abs()).collect());
        Ok(())
    }

    /// Removes active patches whose last change is below a third of the mean
    /// active change; lowest changes go first while the cap allows.
    /// Returns the removed indices.
    pub fn prune_stale(&mut self) -> Vec<usize> {
        self.invocations += 1;
        let Some(changes) = &self.changes else {
            return Vec::new();
        };
        if self.invocations > self.t_max {
            return Vec::new();
        }
        let active = self.active();
        let act: Vec<usize> = (0..self.len()).filter(|&i| active[i]).collect();
        let mean = act.iter().map(|&i| changes[i]).sum::<f64>() / act.len() as f64;
        let threshold = mean / 3.0;
        let mut candidates: Vec<usize> = act.iter().copied().filter(|&i| changes[i] < threshold).collect();
        candidates.sort_by(|&a, &b| changes[a].total_cmp(&changes[b]).then(a.cmp(&b)));
        let cap = (self.removal_cap * self.len() as f64).floor() as usize;
        let room = cap.saturating_sub(self.removed_count()).min(act.len() - 1);
        candidates.truncate(room);
        for &i in &candidates {
            self.removed[i] = true;
        }
        normalize_active(&mut self.weights, &self.removed);
        candidates
    }

    /// Even blend of the current weights and the energy snapshot.
    pub fn finalize(&self) -> Vec<f64> {
        let mut w: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.original)
            .map(|(c, o)| 0.5 * c + 0.5 * o)
            .collect();
        normalize_active(&mut w, &self.removed);
        w
    }

    /// Largest deviation of the active weights' sum from 1, or infinity if a
    /// removed patch carries weight or a weight is negative.
    pub fn simplex_defect(&self) -> f64 {
        if self.weights.iter().zip(&self.removed).any(|(w, &r)| *w < 0.0 || (r && *w != 0.0)) {
            return f64::INFINITY;
        }
        (self.weights.iter().sum::<f64>() - 1.0).abs()
    }
}

pub fn uniform_weights(m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::invalid("uniform weights need at least one patch"));
    }
    let mut w = vec![1.0 / m as f64; m];
    // absorb the rounding in the last entry so the running sum is exactly 1
    let head: f64 = w[..m - 1].iter().sum();
    w[m - 1] = 1.0 - head;
    Ok(w)
}

/// Row L2 norms of a `[M, d]` gradient.
pub fn patch_importance(grad: &Tensor) -> Vec<f64> {
    (0..grad.rows())
        .map(|i| grad.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}
