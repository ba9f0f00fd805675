//! Synthetic handwriting corpus: writer styles, page rendering, damage,
//! forgeries and the on-disk manifest.

pub mod damage;
pub mod manifest;
pub mod pgm;
pub mod render;
pub mod style;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use damage::{apply_damage, damage_image, DamageKind, Damaged};
pub use manifest::{load_corpus, write_corpus, CorpusManifest, PageRecord};
pub use pgm::GrayImage;
pub use render::{render_page, render_with_ink, Rendering};
pub use style::{sample_writer, WriterStyle};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forgery {
    pub imposter_id: usize,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    pub image: GrayImage,
    pub writer_id: usize,
    pub damage_ratio: f64,
    pub forgery: Option<Forgery>,
    pub render_seed: u64,
}

impl Page {
    pub fn genuine(image: GrayImage, render_seed: u64) -> Self {
        Self {
            image,
            writer_id: 0,
            damage_ratio: 0.0,
            forgery: None,
            render_seed,
        }
    }

    pub fn with_writer(mut self, writer_id: usize) -> Self {
        self.writer_id = writer_id;
        self
    }

    pub fn is_forged(&self) -> bool {
        self.forgery.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Writer {
    pub id: usize,
    pub style: WriterStyle,
}

/// Page rendered from the interpolated style `fidelity·target + (1 −
/// fidelity)·imposter`, labeled as the target writer.
pub fn forge_page(
    target: &Writer,
    imposter: &Writer,
    fidelity: f64,
    render_seed: u64,
    height: usize,
    width: usize,
) -> Result<Page> {
    if !(0.0..=1.0).contains(&fidelity) {
        return Err(Error::invalid(format!("forgery fidelity {fidelity} outside [0, 1]")));
    }
    let style = target.style.interpolate(&imposter.style, fidelity);
    let mut page = render_page(&style, render_seed, height, width)?.with_writer(target.id);
    page.forgery = Some(Forgery {
        imposter_id: imposter.id,
        fidelity,
    });
    Ok(page)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pretrain" => Some(Self::Pretrain),
            "finetune" => Some(Self::Finetune),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub writers: usize,
    pub pages_per_writer: usize,
    pub height: usize,
    pub width: usize,
    /// Mean damage ratio; per-page ratios are uniform on `[0, 2·mean]`.
    pub damage_mean: f64,
    pub damage_kinds: BTreeSet<DamageKind>,
    pub forgery_frac: f64,
    pub fidelity_range: (f64, f64),
    /// Pretrain / finetune / test shares per writer.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            writers: 10,
            pages_per_writer: 20,
            height: 64,
            width: 64,
            damage_mean: 0.10,
            damage_kinds: DamageKind::ALL.into_iter().collect(),
            forgery_frac: 0.10,
            fidelity_range: (0.6, 0.9),
            split: (0.7, 0.15, 0.15),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        frac("forgery_frac", self.forgery_frac)?;
        frac("fidelity_range.0", self.fidelity_range.0)?;
        frac("fidelity_range.1", self.fidelity_range.1)?;
        frac("split.0", self.split.0)?;
        frac("split.1", self.split.1)?;
        frac("split.2", self.split.2)?;
        if self.fidelity_range.0 > self.fidelity_range.1 {
            return Err(Error::invalid("fidelity_range must be ordered"));
        }
        if (self.split.0 + self.split.1 + self.split.2 - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("split fractions must sum to 1"));
        }
        if !(0.0..=damage::MAX_DAMAGE / 2.0).contains(&self.damage_mean) {
            return Err(Error::invalid(format!(
                "damage_mean = {} is outside [0, {}]",
                self.damage_mean,
                damage::MAX_DAMAGE / 2.0
            )));
        }
        if self.writers == 0 || self.pages_per_writer == 0 {
            return Err(Error::invalid("corpus needs at least one writer and one page"));
        }
        if self.forgery_frac > 0.0 && self.writers < 2 {
            return Err(Error::invalid("forgeries need at least two writers"));
        }
        if self.damage_mean > 0.0 && self.damage_kinds.is_empty() {
            return Err(Error::invalid("damage_mean > 0 needs at least one damage kind"));
        }
        Ok(())
    }

    pub fn style_seed(&self, writer: usize) -> u64 {
        seed::derive(self.seed, &[1, writer as u64])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPage {
    pub id: usize,
    pub split: Split,
    pub page: Page,
    pub damage_seed: u64,
    pub damage_kinds: BTreeSet<DamageKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub pages: Vec<CorpusPage>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CorpusPage> {
        self.pages.iter().filter(move |p| p.split == split)
    }

    pub fn writers(&self) -> Vec<Writer> {
        (0..self.config.writers)
            .map(|id| Writer {
                id,
                style: sample_writer(self.config.style_seed(id)),
            })
            .collect()
    }
}

struct PagePlan {
    id: usize,
    writer: usize,
    split: Split,
    render_seed: u64,
    damage_seed: u64,
    damage_ratio: f64,
    damage_kinds: BTreeSet<DamageKind>,
    forgery: Option<Forgery>,
}

/// Builds every page in memory. Page ids run writer-major.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let writers: Vec<Writer> = (0..config.writers)
        .map(|id| Writer {
            id,
            style: sample_writer(config.style_seed(id)),
        })
        .collect();
    let k = config.pages_per_writer;
    let total = config.writers * k;
    let mut rng = seed::rng_at(config.seed, &[2]);

    let n_pre = (config.split.0 * k as f64).round() as usize;
    let n_fine = ((config.split.1 * k as f64).round() as usize).min(k - n_pre.min(k));
    let mut splits = vec![Split::Test; total];
    for w in 0..config.writers {
        let mut idx: Vec<usize> = (0..k).collect();
        idx.shuffle(&mut rng);
        for (rank, &j) in idx.iter().enumerate() {
            splits[w * k + j] = if rank < n_pre {
                Split::Pretrain
            } else if rank < n_pre + n_fine {
                Split::Finetune
            } else {
                Split::Test
            };
        }
    }

    let n_forged = (config.forgery_frac * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let mut forged = vec![None; total];
    for &p in order.iter().take(n_forged) {
        let target = p / k;
        let mut imposter = rng.gen_range(0..config.writers - 1);
        if imposter >= target {
            imposter += 1;
        }
        let (lo, hi) = config.fidelity_range;
        let fidelity = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        forged[p] = Some(Forgery {
            imposter_id: imposter,
            fidelity,
        });
    }

    let kinds: Vec<DamageKind> = config.damage_kinds.iter().copied().collect();
    let plans: Vec<PagePlan> = (0..total)
        .map(|id| {
            let damage_ratio = if config.damage_mean > 0.0 {
                rng.gen_range(0.0..=2.0 * config.damage_mean).min(damage::MAX_DAMAGE)
            } else {
                0.0
            };
            let mut damage_kinds = BTreeSet::new();
            if !kinds.is_empty() {
                while damage_kinds.is_empty() {
                    for &kd in &kinds {
                        if rng.gen_bool(0.5) {
                            damage_kinds.insert(kd);
                        }
                    }
                }
            }
            PagePlan {
                id,
                writer: id / k,
                split: splits[id],
                render_seed: seed::derive(config.seed, &[3, id as u64]),
                damage_seed: seed::derive(config.seed, &[4, id as u64]),
                damage_ratio,
                damage_kinds,
                forgery: forged[id],
            }
        })
        .collect();

    let pages = plans
        .into_par_iter()
        .map(|plan| {
            let page = match plan.forgery {
                Some(f) => forge_page(
                    &writers[plan.writer],
                    &writers[f.imposter_id],
                    f.fidelity,
                    plan.render_seed,
                    config.height,
                    config.width,
                )?,
                None => render_page(&writers[plan.writer].style, plan.render_seed, config.height, config.width)?
                    .with_writer(plan.writer),
            };
            let page = apply_damage(&page, &plan.damage_kinds, plan.damage_ratio, plan.damage_seed)?;
            Ok(CorpusPage {
                id: plan.id,
                split: plan.split,
                page,
                damage_seed: plan.damage_seed,
                damage_kinds: plan.damage_kinds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: config.clone(),
        pages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            writers: 4,
            pages_per_writer: 10,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn forgery_endpoints() {
        let t = Writer {
            id: 2,
            style: sample_writer(20),
        };
        let i = Writer {
            id: 5,
            style: sample_writer(50),
        };
        let hi = forge_page(&t, &i, 1.0, 9, 64, 64).unwrap();
        assert_eq!(hi.image, render_page(&t.style, 9, 64, 64).unwrap().image);
        let lo = forge_page(&t, &i, 0.0, 9, 64, 64).unwrap();
        assert_eq!(lo.image, render_page(&i.style, 9, 64, 64).unwrap().image);
        assert_eq!(lo.writer_id, 2);
        assert_eq!(lo.forgery.unwrap().imposter_id, 5);
    }

    #[test]
    fn default_split_is_fourteen_three_three() {
        let c = generate_corpus(&CorpusConfig {
            writers: 2,
            ..Default::default()
        })
        .unwrap();
        for w in 0..2 {
            let count = |s| c.pages.iter().filter(|p| p.page.writer_id == w && p.split == s).count();
            assert_eq!(
                (count(Split::Pretrain), count(Split::Finetune), count(Split::Test)),
                (14, 3, 3)
            );
        }
    }

    #[test]
    fn forged_count_follows_fraction() {
        let c = generate_corpus(&small(3)).unwrap();
        assert_eq!(c.pages.iter().filter(|p| p.page.is_forged()).count(), 4);
        let none = generate_corpus(&CorpusConfig {
            forgery_frac: 0.0,
            ..small(3)
        })
        .unwrap();
        assert!(none.pages.iter().all(|p| !p.page.is_forged()));
    }

    #[test]
    fn forged_pages_name_both_writers() {
        let c = generate_corpus(&small(4)).unwrap();
        for p in c.pages.iter().filter(|p| p.page.is_forged()) {
            let f = p.page.forgery.unwrap();
            assert_ne!(f.imposter_id, p.page.writer_id);
            assert!((0.6..=0.9).contains(&f.fidelity));
        }
    }

    #[test]
    fn regeneration_is_identical() {
        assert_eq!(generate_corpus(&small(5)).unwrap(), generate_corpus(&small(5)).unwrap());
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let bad = CorpusConfig {
            forgery_frac: 1.5,
            ..small(1)
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::InvalidArgument(_))));
    }
}
