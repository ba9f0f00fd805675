//! Synthetic page defects: scratches, stains, folds and blanked patches.
//!
//! Elements are added one at a time, each sized to the remaining budget of
//! altered pixels, until the measured altered fraction reaches the request.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pgm::GrayImage;
use super::Page;
use crate::error::{Error, Result};
use crate::seed;

pub const MAX_DAMAGE: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DamageKind {
    Scratch,
    Stain,
    Fold,
    BlankPatch,
}

impl DamageKind {
    pub const ALL: [DamageKind; 4] = [
        DamageKind::Scratch,
        DamageKind::Stain,
        DamageKind::Fold,
        DamageKind::BlankPatch,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scratch" => Some(Self::Scratch),
            "stain" => Some(Self::Stain),
            "fold" => Some(Self::Fold),
            "blank-patch" => Some(Self::BlankPatch),
            _ => None,
        }
    }
}

/// Slack below the requested fraction at which the loop stops.
const UNDERSHOOT: f64 = 0.01;
const MAX_ELEMENTS: usize = 20_000;

struct Work<'a> {
    src: &'a GrayImage,
    img: Vec<f64>,
    h: usize,
    w: usize,
}

impl Work<'_> {
    fn changed(&self) -> usize {
        self.img
            .iter()
            .zip(&self.src.pixels)
            .filter(|(v, &s)| quantize(**v) != s)
            .count()
    }
}

fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

fn blank_patch(wk: &mut Work, rng: &mut ChaCha8Rng, budget: f64) {
    let area = budget.max(1.0);
    let aspect = rng.gen_range(0.5..2.0f64);
    let ph = ((area * aspect).sqrt().round() as usize).clamp(1, wk.h);
    let pw = ((area / ph as f64).round() as usize).clamp(1, wk.w);
    let r0 = rng.gen_range(0..=wk.h - ph);
    let c0 = rng.gen_range(0..=wk.w - pw);
    for r in r0..r0 + ph {
        for c in c0..c0 + pw {
            wk.img[r * wk.w + c] = 255.0;
        }
    }
}

fn stain(wk: &mut Work, rng: &mut ChaCha8Rng, budget: f64) {
    let amp = rng.gen_range(0.15..0.3);
    // radius where the darkening still moves a pixel by half a gray level
    let reach = (2.0 * amp * 255.0f64).ln().max(0.1);
    let r_eff = (budget.max(4.0) / PI).sqrt();
    let sigma = (r_eff / (2.0 * reach).sqrt()).max(0.5);
    let cy = rng.gen_range(0.0..wk.h as f64);
    let cx = rng.gen_range(0.0..wk.w as f64);
    let extent = (r_eff + 2.0).ceil() as isize;
    for r in (cy as isize - extent).max(0)..(cy as isize + extent).min(wk.h as isize) {
        for c in (cx as isize - extent).max(0)..(cx as isize + extent).min(wk.w as isize) {
            let d2 = (r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2);
            let g = (-d2 / (2.0 * sigma * sigma)).exp();
            if g * amp * 255.0 < 0.5 {
                continue;
            }
            let speckle = rng.gen_range(-6.0..6.0) * g;
            let i = r as usize * wk.w + c as usize;
            wk.img[i] = wk.img[i] * (1.0 - amp * g) - amp * g * 20.0 + speckle;
        }
    }
}

fn scratch(wk: &mut Work, rng: &mut ChaCha8Rng, budget: f64) {
    let thick = if rng.gen_bool(0.5) { 1.0 } else { 2.0 };
    let value = if rng.gen_bool(0.5) { 255.0 } else { rng.gen_range(20.0..60.0) };
    let length = (budget.max(3.0) / thick).min((wk.h + wk.w) as f64 * 2.0);
    let segments = rng.gen_range(2..=4);
    let seg_len = length / segments as f64;
    let mut y = rng.gen_range(0.0..wk.h as f64);
    let mut x = rng.gen_range(0.0..wk.w as f64);
    let mut heading = rng.gen_range(0.0..TAU);
    for _ in 0..segments {
        heading += rng.gen_range(-0.6..0.6);
        let steps = (seg_len * 2.0).ceil() as usize;
        for _ in 0..steps {
            y += 0.5 * heading.sin();
            x += 0.5 * heading.cos();
            if y < 0.0 || y >= wk.h as f64 {
                heading = -heading;
                y = y.clamp(0.0, wk.h as f64 - 1e-9);
            }
            if x < 0.0 || x >= wk.w as f64 {
                heading = PI - heading;
                x = x.clamp(0.0, wk.w as f64 - 1e-9);
            }
            let (r, c) = (y as usize, x as usize);
            for dr in 0..thick as usize {
                let rr = (r + dr).min(wk.h - 1);
                wk.img[rr * wk.w + c] = value;
            }
        }
    }
}

fn fold(wk: &mut Work, rng: &mut ChaCha8Rng, budget: f64) {
    let angle = rng.gen_range(0.0..PI);
    let (ny, nx) = (angle.sin(), angle.cos());
    let cy = rng.gen_range(0.0..wk.h as f64);
    let cx = rng.gen_range(0.0..wk.w as f64);
    let span = (wk.h as f64).hypot(wk.w as f64);
    let half = (budget.max(2.0) / (2.0 * span)).clamp(0.5, span);
    let depth = rng.gen_range(0.2..0.4);
    for r in 0..wk.h {
        for c in 0..wk.w {
            let d = ((r as f64 + 0.5 - cy) * ny + (c as f64 + 0.5 - cx) * nx).abs();
            if d > half {
                continue;
            }
            // linear ramp: darkest on the crease, fading to the band edge
            let k = depth * (1.0 - d / (half + 1.0)) + 0.01;
            let i = r * wk.w + c;
            wk.img[i] = wk.img[i] * (1.0 - k) - 2.0;
        }
    }
}

/// Result of damaging an image: the new pixels and which of them changed.
pub struct Damaged {
    pub image: GrayImage,
    pub altered: Vec<bool>,
}

impl Damaged {
    pub fn altered_fraction(&self) -> f64 {
        self.altered.iter().filter(|&&a| a).count() as f64 / self.altered.len() as f64
    }
}

pub fn damage_image(src: &GrayImage, kinds: &BTreeSet<DamageKind>, ratio: f64, damage_seed: u64) -> Result<Damaged> {
    if !(0.0..=MAX_DAMAGE).contains(&ratio) {
        return Err(Error::invalid(format!("damage ratio {ratio} outside [0, {MAX_DAMAGE}]")));
    }
    if ratio > 0.0 && kinds.is_empty() {
        return Err(Error::invalid("damage requested with no defect kinds"));
    }
    let mut wk = Work {
        src,
        img: src.pixels.iter().map(|&p| p as f64).collect(),
        h: src.height,
        w: src.width,
    };
    let total = (wk.h * wk.w) as f64;
    let target = ratio * total;
    let kinds: Vec<DamageKind> = kinds.iter().copied().collect();
    let mut rng = seed::rng(damage_seed);
    let mut changed = 0usize;
    let mut elements = 0;
    while ratio > 0.0 && (changed as f64) < target - UNDERSHOOT * total && elements < MAX_ELEMENTS {
        let remaining = target - changed as f64;
        // elements take a random share of what is left so several kinds mix
        let budget = remaining * rng.gen_range(0.3..1.0);
        let before = wk.img.clone();
        match kinds[rng.gen_range(0..kinds.len())] {
            DamageKind::BlankPatch => blank_patch(&mut wk, &mut rng, budget),
            DamageKind::Stain => stain(&mut wk, &mut rng, budget),
            DamageKind::Scratch => scratch(&mut wk, &mut rng, budget),
            DamageKind::Fold => fold(&mut wk, &mut rng, budget),
        }
        let now = wk.changed();
        if now as f64 > target + 0.02 * total {
            wk.img = before;
        } else {
            changed = now;
        }
        elements += 1;
    }
    let pixels: Vec<u8> = wk.img.iter().map(|&v| quantize(v)).collect();
    let altered = pixels.iter().zip(&src.pixels).map(|(a, b)| a != b).collect();
    Ok(Damaged {
        image: GrayImage::new(wk.h, wk.w, pixels)?,
        altered,
    })
}

/// Returns a damaged copy of `page`; writer and forgery labels are kept.
pub fn apply_damage(page: &Page, kinds: &BTreeSet<DamageKind>, ratio: f64, damage_seed: u64) -> Result<Page> {
    let d = damage_image(&page.image, kinds, ratio, damage_seed)?;
    let mut out = page.clone();
    out.image = d.image;
    out.damage_ratio = ratio;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::render::render_page;
    use super::super::style::sample_writer;
    use super::*;

    fn all() -> BTreeSet<DamageKind> {
        DamageKind::ALL.into_iter().collect()
    }

    fn page(seed: u64) -> Page {
        render_page(&sample_writer(seed), seed, 64, 64).unwrap()
    }

    #[test]
    fn zero_ratio_is_identity() {
        let p = page(1);
        let d = apply_damage(&p, &all(), 0.0, 5).unwrap();
        assert_eq!(d.image, p.image);
    }

    #[test]
    fn ratio_above_limit_is_rejected() {
        assert!(apply_damage(&page(1), &all(), 0.95, 5).is_err());
    }

    #[test]
    fn thirty_percent_all_kinds() {
        let p = page(2);
        let d = damage_image(&p.image, &all(), 0.3, 17).unwrap();
        let f = p.image.changed_fraction(&d.image);
        assert!((0.25..=0.35).contains(&f), "{f}");
    }

    #[test]
    fn blank_patch_sets_background() {
        let p = page(3);
        let kinds = [DamageKind::BlankPatch].into_iter().collect();
        let d = damage_image(&p.image, &kinds, 0.5, 4).unwrap();
        for (i, &a) in d.altered.iter().enumerate() {
            if a {
                assert_eq!(d.image.pixels[i], 255);
            }
        }
        assert!((d.altered_fraction() - 0.5).abs() <= 0.05);
    }

    #[test]
    fn each_kind_alone_reaches_its_target() {
        for kind in DamageKind::ALL {
            let kinds = [kind].into_iter().collect();
            for (i, ratio) in [0.1, 0.5, 0.9].into_iter().enumerate() {
                let p = page(10 + i as u64);
                let d = damage_image(&p.image, &kinds, ratio, 99 + i as u64).unwrap();
                let f = d.altered_fraction();
                assert!((f - ratio).abs() <= 0.05, "{kind:?} at {ratio}: {f}");
            }
        }
    }

    #[test]
    fn damage_is_deterministic() {
        let p = page(4);
        let a = apply_damage(&p, &all(), 0.4, 8).unwrap();
        let b = apply_damage(&p, &all(), 0.4, 8).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.writer_id, p.writer_id);
    }
}
