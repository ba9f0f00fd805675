//! Cosine similarity, InfoNCE, the two-branch loss and AdamW.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Which online embedding anchors which loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Prediction against momentum for the contrastive term, projection
    /// against momentum for the momentum term.
    PredictionFirst,
    ProjectionFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_cl: f64,
    pub lambda_mo: f64,
    pub pairing: Pairing,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            lambda_cl: 0.6,
            lambda_mo: 0.3,
            pairing: Pairing::PredictionFirst,
            learning_rate: 0.3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("loss.temperature = {} must be positive", self.temperature)));
        }
        if !(self.lambda_cl >= 0.0 && self.lambda_mo >= 0.0) || self.lambda_cl + self.lambda_mo <= 0.0 {
            return Err(Error::invalid("loss.lambda_cl and loss.lambda_mo must be nonnegative with a positive sum"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("loss.learning_rate must be a nonnegative number"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("loss.beta1 and loss.beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("loss.eps must be positive and loss.weight_decay nonnegative"));
        }
        Ok(())
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::invalid(format!("cosine of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean over anchors of the cross-entropy of matching anchor `i` to
/// positive `i` among all positives, on cosine logits scaled by `1/τ`.
pub fn infonce(t: &mut Tape, anchors: Var, positives: Var, temperature: f64) -> Result<Var> {
    let (sa, sp) = (t.shape(anchors).to_vec(), t.shape(positives).to_vec());
    if sa.len() != 2 || sa != sp {
        return Err(Error::invalid(format!("infonce needs equal [B, d] inputs, got {sa:?} and {sp:?}")));
    }
    if sa[0] < 2 {
        return Err(Error::invalid("infonce needs a batch of at least 2"));
    }
    let a = t.l2_normalize_rows(anchors)?;
    let p = t.l2_normalize_rows(positives)?;
    let sim = t.matmul_nt(a, p)?;
    let logits = t.scale(sim, 1.0 / temperature);
    let ls = t.log_softmax_rows(logits)?;
    let d = t.diag(ls)?;
    let m = t.mean(d);
    Ok(t.scale(m, -1.0))
}

pub struct LossTerms {
    pub total: Var,
    pub contrastive: Var,
    pub momentum: Var,
}

/// Weighted sum of the two InfoNCE terms. `targets` must be constants.
pub fn combined_loss(
    t: &mut Tape,
    prediction: Var,
    projection: Var,
    targets: Var,
    config: &LossConfig,
) -> Result<LossTerms> {
    let rows = |t: &Tape, v: Var| t.shape(v).first().copied();
    if rows(t, prediction) != rows(t, targets) || rows(t, projection) != rows(t, targets) {
        return Err(Error::invalid("online and momentum embeddings are not aligned"));
    }
    let (first, second) = match config.pairing {
        Pairing::PredictionFirst => (prediction, projection),
        Pairing::ProjectionFirst => (projection, prediction),
    };
    let contrastive = infonce(t, first, targets, config.temperature)?;
    let momentum = infonce(t, second, targets, config.temperature)?;
    let a = t.scale(contrastive, config.lambda_cl);
    let total = if config.lambda_mo == 0.0 {
        a
    } else {
        let b = t.scale(momentum, config.lambda_mo);
        t.add(a, b)?
    };
    Ok(LossTerms {
        total,
        contrastive,
        momentum,
    })
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub first: Params,
    pub second: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub applied: bool,
    pub diagnostic: Option<String>,
}

impl Adam {
    /// Zero moments for every tensor of every group. Names must be unique
    /// across groups.
    pub fn new(groups: &[&Params]) -> Self {
        let mut first = Params::new();
        for (n, t) in groups.iter().flat_map(|g| g.iter()) {
            first.insert(n, Tensor::zeros(t.shape()));
        }
        Self {
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// Gradients of bound parameters gathered in `params` order.
    pub fn collect(grads: &Gradients, bound: &crate::model::Bound, params: &Params) -> Params {
        let mut out = Params::new();
        for ((n, v), (_, p)) in bound.vars.iter().zip(params.iter()) {
            let g = grads.try_get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
            out.insert(n.clone(), g);
        }
        out
    }

    /// One update of every parameter that has a gradient entry. A
    /// non-finite gradient skips the whole step.
    pub fn apply(&mut self, groups: &mut [&mut Params], grads: &[&Params], config: &LossConfig) -> Result<StepOutcome> {
        for (n, g) in grads.iter().flat_map(|g| g.iter()) {
            if !g.is_finite() {
                return Ok(StepOutcome {
                    applied: false,
                    diagnostic: Some(format!("non-finite gradient for {n}; step skipped")),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let lr = config.learning_rate;
        for (n, p) in groups.iter_mut().flat_map(|g| g.iter_mut()) {
            let Some(g) = grads.iter().find_map(|g| g.get(n)) else { continue };
            let m = self.first.get_mut(n).ok_or_else(|| Error::InvalidState(format!("no moment for {n}")))?;
            if m.shape() != p.shape() || g.shape() != p.shape() {
                return Err(Error::InvalidState(format!("shape mismatch for {n}")));
            }
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            }
            let m = m.data().to_vec();
            let v = self.second.get_mut(n).ok_or_else(|| Error::InvalidState(format!("no moment for {n}")))?;
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            }
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(&m).zip(v.data()) {
                let update = (mi / c1) / ((vi / c2).sqrt() + config.eps);
                *pi -= lr * (update + config.weight_decay * *pi);
            }
        }
        Ok(StepOutcome {
            applied: true,
            diagnostic: None,
        })
    }
}
