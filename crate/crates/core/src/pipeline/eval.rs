use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::checkpoint::Checkpoint;
use crate::config::{ProbeConfig, RunConfig};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::matching::{uniform_weights, WeightState};
use crate::model::{encode, forward_online};
use crate::numerics::tape::log_sum_exp;
use crate::numerics::{Tape, Tensor};
use crate::patching::{patch_energy_scores, split_patches, CHANNELS};

/// Pages with their writer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<usize>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn from_split(corpus: &Corpus, split: Split) -> Self {
        let pages: Vec<_> = corpus.split(split).collect();
        Self {
            ids: pages.iter().map(|p| p.id).collect(),
            images: pages.iter().map(|p| p.page.image.to_unit()).collect(),
            labels: pages.iter().map(|p| p.page.writer_id).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Patch weights used at inference: energy scores when adaptive matching is
/// on, uniform otherwise.
fn inference_weights(config: &RunConfig, scores: Vec<f64>) -> Result<Vec<f64>> {
    let m = scores.len();
    if !config.toggles.adaptive_matching {
        return uniform_weights(m);
    }
    let mut ws = WeightState::new(m)?;
    ws.energy_reweight(&scores)?;
    Ok(ws.finalize())
}

/// Unit-norm online projections, `[N, d']`. Each page is embedded on its
/// own tape so results do not depend on batching.
pub fn embed_images(state: &TrainState, config: &RunConfig, images: &[Tensor]) -> Result<Tensor> {
    let model = &state.model;
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|img| {
            let d = state.denoise(img, config.toggles.energy_operator, None)?;
            let seq = split_patches(&d, model.patch)?;
            let w = inference_weights(config, patch_energy_scores(&seq))?;
            let mut t = Tape::new();
            let bound = model.bind(&mut t, false);
            let x = t.constant(seq.patches.reshaped(&[seq.len(), CHANNELS, seq.patch, seq.patch])?);
            let z = encode(&mut t, &model.config, &bound.encoder, x, seq.len())?;
            let out = forward_online(&mut t, &bound, z, std::sync::Arc::new(w), seq.len())?;
            let f = t.l2_normalize_rows(out.projection)?;
            Ok(t.value(f).data().to_vec())
        })
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(config.model.out_dim, |r| r.len());
    Tensor::new(&[rows.len(), width], rows.concat())
}

/// Linear probe `logits = f·W` with classes absent from the training labels
/// masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    /// `[d', C]`.
    pub weights: Tensor,
    pub masked: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Probe {
    pub fn classes(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `[N, C]` logits; masked classes get `-inf`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let (n, d) = (features.rows(), features.row_len());
        if d != self.weights.shape()[0] {
            return Err(Error::invalid(format!(
                "features have width {d}, the probe expects {}",
                self.weights.shape()[0]
            )));
        }
        let c = self.classes();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let f = features.row(i);
            for k in 0..c {
                out[i * c + k] = if self.masked.contains(&k) {
                    f64::NEG_INFINITY
                } else {
                    (0..d).map(|j| f[j] * self.weights.at2(j, k)).sum()
                };
            }
        }
        Tensor::new(&[n, c], out)
    }

    pub fn to_checkpoint(&self, config_digest: [u8; 32]) -> Checkpoint {
        let mut c = Checkpoint::new(config_digest);
        c.push("probe/weights", &self.weights);
        // one flag per class so the section is never empty
        let flags = (0..self.classes()).map(|k| f64::from(u8::from(self.masked.contains(&k)))).collect();
        c.push("probe/masked", &Tensor::vector(flags));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let weights = c.get("probe/weights")?;
        if weights.shape().len() != 2 {
            return Err(Error::Format("probe/weights must be a matrix".into()));
        }
        let flags = c.get("probe/masked")?;
        if flags.len() != weights.shape()[1] {
            return Err(Error::Format("probe/masked needs one flag per class".into()));
        }
        let masked = (0..flags.len()).filter(|&k| flags.data()[k] != 0.0).collect();
        Ok(Self {
            weights,
            masked,
            warnings: Vec::new(),
        })
    }
}

/// Softmax cross-entropy probe on frozen `features`, zero-initialized and
/// trained with Adam for `cfg.steps` full-batch steps.
pub fn fit_probe(features: &Tensor, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Result<Probe> {
    let (n, d) = (features.rows(), features.row_len());
    if n == 0 || n != labels.len() {
        return Err(Error::invalid("probe needs one label per feature row"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {y} outside {classes} classes")));
    }
    let mut present = vec![false; classes];
    for &y in labels {
        present[y] = true;
    }
    let masked: Vec<usize> = (0..classes).filter(|&k| !present[k]).collect();
    let warnings = masked
        .iter()
        .map(|k| format!("class {k} has no finetune pages; masked"))
        .collect();
    let mut probe = Probe {
        weights: Tensor::zeros(&[d, classes]),
        masked,
        warnings,
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; d * classes];
    let mut v = vec![0.0; d * classes];
    for step in 1..=cfg.steps {
        let logits = probe.logits(features)?;
        let mut grad = vec![0.0; d * classes];
        for i in 0..n {
            let row = logits.row(i);
            let lse = log_sum_exp(row);
            let f = features.row(i);
            for k in 0..classes {
                let p = (row[k] - lse).exp();
                let r = (p - if k == labels[i] { 1.0 } else { 0.0 }) / n as f64;
                if r != 0.0 {
                    for j in 0..d {
                        grad[j * classes + k] += f[j] * r;
                    }
                }
            }
        }
        let (c1, c2) = (1.0 - b1.powi(step as i32), 1.0 - b2.powi(step as i32));
        for (idx, w) in probe.weights.data_mut().iter_mut().enumerate() {
            m[idx] = b1 * m[idx] + (1.0 - b1) * grad[idx];
            v[idx] = b2 * v[idx] + (1.0 - b2) * grad[idx] * grad[idx];
            *w -= cfg.learning_rate * (m[idx] / c1) / ((v[idx] / c2).sqrt() + eps);
        }
    }
    if !probe.weights.is_finite() {
        return Err(Error::Numerical("probe weights became non-finite".into()));
    }
    Ok(probe)
}

/// Embeds the finetune split with the frozen model and fits the probe.
pub fn finetune(state: &TrainState, config: &RunConfig, corpus: &Corpus) -> Result<Probe> {
    let set = LabeledSet::from_split(corpus, Split::Finetune);
    if set.is_empty() {
        return Err(Error::invalid("the corpus has no finetune pages"));
    }
    let features = embed_images(state, config, &set.images)?;
    fit_probe(&features, &set.labels, corpus.config.writers, &config.probe)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean negative log-likelihood of the true writer.
    pub risk: f64,
    pub top1: f64,
    pub top5: f64,
    pub pages: usize,
}

/// Scores `[N, C]` logits. A page's rank counts the classes with a larger
/// logit plus equal logits at a lower index.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    let (n, c) = (logits.rows(), logits.row_len());
    if n == 0 {
        return Err(Error::invalid("cannot score an empty split"));
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    let (mut nll, mut top1, mut top5) = (0.0, 0usize, 0usize);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} outside {c} classes")));
        }
        let row = logits.row(i);
        nll += log_sum_exp(row) - row[y];
        let rank = (0..c)
            .filter(|&k| row[k] > row[y] || (row[k] == row[y] && k < y))
            .count();
        top1 += usize::from(rank < 1);
        top5 += usize::from(rank < 5);
    }
    Ok(Metrics {
        risk: nll / n as f64,
        top1: top1 as f64 / n as f64,
        top5: top5 as f64 / n as f64,
        pages: n,
    })
}

/// Metrics over `set`, skipping pages whose writer the probe masks.
pub fn score_set(state: &TrainState, config: &RunConfig, probe: &Probe, set: &LabeledSet) -> Result<Metrics> {
    let keep: Vec<usize> = (0..set.len()).filter(|&i| !probe.masked.contains(&set.labels[i])).collect();
    if keep.is_empty() {
        return Err(Error::invalid("no evaluable pages in the split"));
    }
    let images: Vec<Tensor> = keep.iter().map(|&i| set.images[i].clone()).collect();
    let labels: Vec<usize> = keep.iter().map(|&i| set.labels[i]).collect();
    let features = embed_images(state, config, &images)?;
    score_logits(&probe.logits(&features)?, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: String,
    pub level: f64,
    pub seed: u64,
    pub config_digest: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub config_digest: String,
    pub masked_classes: Vec<usize>,
    pub rows: Vec<EvalRow>,
    pub wall_clock_seconds: f64,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl EvalReport {
    pub fn new(config: &RunConfig, probe: &Probe) -> Self {
        Self {
            seed: config.seed,
            config_digest: hex(&config.digest()),
            masked_classes: probe.masked.clone(),
            rows: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn push(&mut self, condition: &str, level: f64, metrics: Metrics) {
        self.rows.push(EvalRow {
            condition: condition.to_string(),
            level,
            seed: self.seed,
            config_digest: self.config_digest.clone(),
            metrics,
        });
    }

    /// The report with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<12} {:>6} {:>8} {:>7} {:>7} {:>6}\n", "condition", "level", "risk", "top1", "top5", "pages");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>6.2} {:>8.4} {:>7.4} {:>7.4} {:>6}\n",
                r.condition, r.level, r.metrics.risk, r.metrics.top1, r.metrics.top5, r.metrics.pages
            ));
        }
        s.push_str(&format!("seed {}  digest {}  {:.1}s\n", self.seed, &self.config_digest[..12], self.wall_clock_seconds));
        s
    }
}

/// Clean test-split evaluation; `state` and `probe` are only read.
pub fn evaluate(state: &TrainState, config: &RunConfig, probe: &Probe, corpus: &Corpus) -> Result<EvalReport> {
    let start = Instant::now();
    let set = LabeledSet::from_split(corpus, Split::Test);
    if set.is_empty() {
        return Err(Error::invalid("the corpus has no test pages"));
    }
    let mut report = EvalReport::new(config, probe);
    report.push("clean", 0.0, score_set(state, config, probe, &set)?);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_logits_are_perfect() {
        let labels = [2, 0, 1];
        let mut data = vec![-50.0; 9];
        for (i, &y) in labels.iter().enumerate() {
            data[i * 3 + y] = 50.0;
        }
        let m = score_logits(&Tensor::new(&[3, 3], data).unwrap(), &labels).unwrap();
        assert_eq!((m.top1, m.top5), (1.0, 1.0));
        assert!(m.risk < 1e-40);
    }

    #[test]
    fn zero_step_probe_is_uniform() {
        let f = Tensor::new(&[2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let p = fit_probe(&f, &[0, 1], 4, &ProbeConfig { steps: 0, ..Default::default() }).unwrap();
        assert!(p.weights.data().iter().all(|&w| w == 0.0));
        assert_eq!(p.masked, vec![2, 3]);
        assert_eq!(p.warnings.len(), 2);
        let l = p.logits(&f).unwrap();
        assert_eq!(l.row(0)[..2], [0.0, 0.0]);
        assert_eq!(l.row(0)[2], f64::NEG_INFINITY);
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(
            score_logits(&Tensor::zeros(&[0, 3]), &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn probe_checkpoint_roundtrip() {
        for masked in [vec![1], vec![]] {
            let p = Probe {
                weights: Tensor::new(&[2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
                masked,
                warnings: Vec::new(),
            };
            let bytes = p.to_checkpoint([1; 32]).encode();
            assert_eq!(Probe::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap(), p);
        }
    }
}
