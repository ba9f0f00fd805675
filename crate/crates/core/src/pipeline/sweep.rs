use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, finetune, score_set, EvalReport, LabeledSet, Metrics, Probe};
use super::train::{pretrain, EpochLog};
use super::{median, tag, TrainState};
use crate::config::{RunConfig, Toggles};
use crate::corpus::damage::MAX_DAMAGE;
use crate::corpus::{damage_image, forge_page, Corpus, DamageKind, Split};
use crate::error::{Error, Result};
use crate::model::EncoderVariant;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Damage,
    Forgery,
}

impl SweepKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "damage" => Some(Self::Damage),
            "forgery" => Some(Self::Forgery),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Damage => "damage",
            Self::Forgery => "forgery",
        }
    }
}

/// Test pages with fresh damage or forgeries at `level`. Level 0 returns
/// the pages untouched.
pub fn perturb_test_pages(corpus: &Corpus, kind: SweepKind, level: f64, sweep_seed: u64) -> Result<LabeledSet> {
    let mut set = LabeledSet::from_split(corpus, Split::Test);
    match kind {
        SweepKind::Damage if !(0.0..=MAX_DAMAGE).contains(&level) => {
            return Err(Error::invalid(format!("damage level {level} outside [0, {MAX_DAMAGE}]")))
        }
        SweepKind::Forgery if !(0.0..=1.0).contains(&level) => {
            return Err(Error::invalid(format!("forgery level {level} outside [0, 1]")))
        }
        _ if level == 0.0 => return Ok(set),
        _ => {}
    }
    let pages: Vec<_> = corpus.split(Split::Test).collect();
    let level_key = level.to_bits();
    match kind {
        SweepKind::Damage => {
            let kinds: BTreeSet<DamageKind> = DamageKind::ALL.into_iter().collect();
            for (img, p) in set.images.iter_mut().zip(&pages) {
                let s = seed::derive(sweep_seed, &[tag::SWEEP, 0, level_key, p.id as u64]);
                *img = damage_image(&p.page.image, &kinds, level, s)?.image.to_unit();
            }
        }
        SweepKind::Forgery => {
            let writers = corpus.writers();
            if writers.len() < 2 {
                return Err(Error::invalid("forgeries need at least two writers"));
            }
            let (lo, hi) = corpus.config.fidelity_range;
            let n = set.len();
            let count = ((level * n as f64).round() as usize).min(n);
            let mut rng = seed::rng_at(sweep_seed, &[tag::SWEEP, 1, level_key]);
            let mut chosen = sample(&mut rng, n, count).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                let target = &writers[set.labels[i]];
                let mut imposter = rng.gen_range(0..writers.len() - 1);
                if imposter >= target.id {
                    imposter += 1;
                }
                let fidelity = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
                let page = forge_page(
                    target,
                    &writers[imposter],
                    fidelity,
                    pages[i].page.render_seed,
                    corpus.config.height,
                    corpus.config.width,
                )?;
                set.images[i] = page.image.to_unit();
            }
        }
    }
    Ok(set)
}

/// One report row per level; `state` and `probe` are only read.
pub fn robustness_sweep(
    state: &TrainState,
    config: &RunConfig,
    probe: &Probe,
    corpus: &Corpus,
    kind: SweepKind,
    levels: &[f64],
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut report = EvalReport::new(config, probe);
    for &level in levels {
        let set = perturb_test_pages(corpus, kind, level, config.sweep.seed)?;
        if set.is_empty() {
            return Err(Error::invalid("the corpus has no test pages"));
        }
        report.push(kind.name(), level, score_set(state, config, probe, &set)?);
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub state: TrainState,
    pub probe: Probe,
    pub history: Vec<EpochLog>,
    pub report: EvalReport,
}

/// Pre-training, probe fitting and clean evaluation.
pub fn run_once(config: &RunConfig, corpus: &Corpus) -> Result<RunOutcome> {
    let start = Instant::now();
    let trained = pretrain(config, corpus)?;
    let probe = finetune(&trained.state, config, corpus)?;
    let mut report = evaluate(&trained.state, config, &probe, corpus)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        state: trained.state,
        probe,
        history: trained.history,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCase {
    pub name: String,
    pub toggles: Toggles,
    pub variant: EncoderVariant,
}

impl AblationCase {
    fn new(name: &str, energy_operator: bool, two_branch: bool, variant: EncoderVariant) -> Self {
        Self {
            name: name.into(),
            toggles: Toggles {
                energy_operator,
                two_branch,
                adaptive_matching: true,
            },
            variant,
        }
    }

    /// `config` with this case's modules and encoder and the given seed.
    pub fn apply(&self, config: &RunConfig, seed: u64) -> RunConfig {
        let mut c = config.clone();
        c.seed = seed;
        c.toggles = self.toggles;
        c.model.variant = self.variant;
        c
    }
}

/// Full configuration first, then each module removed, then both. With
/// `extractors` the same grid is repeated for the transformer encoder.
pub fn default_cases(extractors: bool) -> Vec<AblationCase> {
    let mut out = Vec::new();
    let variants: &[(EncoderVariant, &str)] = if extractors {
        &[(EncoderVariant::ConvSmall, ""), (EncoderVariant::VitTiny, "vit/")]
    } else {
        &[(EncoderVariant::ConvSmall, "")]
    };
    for &(v, prefix) in variants {
        out.push(AblationCase::new(&format!("{prefix}full"), true, true, v));
        out.push(AblationCase::new(&format!("{prefix}no-operator"), false, true, v));
        out.push(AblationCase::new(&format!("{prefix}no-two-branch"), true, false, v));
        out.push(AblationCase::new(&format!("{prefix}neither"), false, false, v));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub case: AblationCase,
    pub seeds: Vec<u64>,
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
    pub median_top1: f64,
    pub median_top5: f64,
    pub median_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Cases whose median top-1 beats the full configuration of the same
    /// encoder.
    pub regressions: Vec<String>,
    pub wall_clock_seconds: f64,
}

impl AblationReport {
    /// Medians and regression flags from `results[case][seed]`.
    pub fn tabulate(cases: &[AblationCase], seeds: &[u64], results: &[Vec<Metrics>]) -> Result<Self> {
        if results.len() != cases.len() || results.iter().any(|r| r.len() != seeds.len()) {
            return Err(Error::invalid("ablation results must hold one metric per case and seed"));
        }
        let rows: Vec<AblationRow> = cases
            .iter()
            .zip(results)
            .map(|(case, ms)| {
                let top1: Vec<f64> = ms.iter().map(|m| m.top1).collect();
                let top5: Vec<f64> = ms.iter().map(|m| m.top5).collect();
                let risk: Vec<f64> = ms.iter().map(|m| m.risk).collect();
                AblationRow {
                    case: case.clone(),
                    seeds: seeds.to_vec(),
                    median_top1: median(&top1),
                    median_top5: median(&top5),
                    median_risk: median(&risk),
                    top1,
                    top5,
                }
            })
            .collect();
        let mut regressions = Vec::new();
        for r in &rows {
            let full = rows.iter().find(|f| {
                f.case.variant == r.case.variant && f.case.toggles.energy_operator && f.case.toggles.two_branch
            });
            if let Some(f) = full {
                if r.median_top1 > f.median_top1 {
                    regressions.push(format!(
                        "{} median top-1 {:.4} exceeds {} {:.4}",
                        r.case.name, r.median_top1, f.case.name, f.median_top1
                    ));
                }
            }
        }
        Ok(Self {
            rows,
            regressions,
            wall_clock_seconds: 0.0,
        })
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.case.name == name)
    }

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
        let mut s = format!(
            "{:<20} {:>8} {:>10} {:>7} {:>7} {:>8}\n",
            "case", "operator", "two-branch", "top1", "top5", "risk"
        );
        for r in &self.rows {
            let on = |b: bool| if b { "yes" } else { "no" };
            s.push_str(&format!(
                "{:<20} {:>8} {:>10} {:>7.4} {:>7.4} {:>8.4}\n",
                r.case.name,
                on(r.case.toggles.energy_operator),
                on(r.case.toggles.two_branch),
                r.median_top1,
                r.median_top5,
                r.median_risk
            ));
        }
        for g in &self.regressions {
            s.push_str(&format!("REGRESSION {g}\n"));
        }
        s
    }
}

/// Runs every case with every seed on the same corpus and tabulates the
/// medians.
pub fn ablate(config: &RunConfig, corpus: &Corpus, cases: &[AblationCase], seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    let start = Instant::now();
    let results = cases
        .iter()
        .map(|case| {
            seeds
                .iter()
                .map(|&s| Ok(run_once(&case.apply(config, s), corpus)?.report.rows[0].metrics))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = AblationReport::tabulate(cases, seeds, &results)?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
