//! Random views of two-channel samples.
//!
//! Geometric transforms, blur and mixup act on both channels alike;
//! brightness and additive noise touch the intensity channel only. Every
//! view is a fixed affine map of the inputs followed by a clamp to [0, 1], so
//! it can be recorded on a tape and differentiated.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CHANNELS;
use crate::energy::DenoisedSample;
use crate::error::{Error, Result};
use crate::numerics::{SparseMap, Tape, Tensor, Var};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    GaussianBlur,
    Mixup,
    HorizontalFlip,
    CropResize,
    Brightness,
    AdditiveNoise,
}

pub const BLUR_BOUNDS: (f64, f64) = (0.3, 1.5);
pub const MIXUP_BOUNDS: (f64, f64) = (0.5, 1.0);
pub const CROP_BOUNDS: (f64, f64) = (0.5, 1.0);
pub const BRIGHTNESS_BOUNDS: (f64, f64) = (-0.2, 0.2);
pub const NOISE_BOUNDS: (f64, f64) = (0.0, 0.1);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub enabled: BTreeSet<Transform>,
    pub blur_sigma: (f64, f64),
    /// Weight of the sample itself in a mixup.
    pub mixup_lambda: (f64, f64),
    /// Side of the crop window as a fraction of the page side.
    pub crop_scale: (f64, f64),
    pub brightness: (f64, f64),
    pub noise_std: (f64, f64),
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            enabled: [
                Transform::GaussianBlur,
                Transform::Mixup,
                Transform::CropResize,
                Transform::Brightness,
                Transform::AdditiveNoise,
            ]
            .into_iter()
            .collect(),
            blur_sigma: BLUR_BOUNDS,
            mixup_lambda: (0.7, 1.0),
            crop_scale: (0.8, 1.0),
            brightness: BRIGHTNESS_BOUNDS,
            noise_std: (0.0, 0.03),
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            enabled: BTreeSet::new(),
            ..Default::default()
        }
    }

    pub fn only(transforms: &[Transform]) -> Self {
        Self {
            enabled: transforms.iter().copied().collect(),
            ..Default::default()
        }
    }

    pub fn has(&self, t: Transform) -> bool {
        self.enabled.contains(&t)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, (lo, hi): (f64, f64), (blo, bhi): (f64, f64)| {
            if lo > hi || lo < blo || hi > bhi {
                Err(Error::invalid(format!(
                    "augment.{name} = ({lo}, {hi}) must be an ordered range within [{blo}, {bhi}]"
                )))
            } else {
                Ok(())
            }
        };
        check("blur_sigma", self.blur_sigma, BLUR_BOUNDS)?;
        check("mixup_lambda", self.mixup_lambda, MIXUP_BOUNDS)?;
        check("crop_scale", self.crop_scale, CROP_BOUNDS)?;
        check("brightness", self.brightness, BRIGHTNESS_BOUNDS)?;
        check("noise_std", self.noise_std, NOISE_BOUNDS)?;
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("augment.flip_prob must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Concrete random choices for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPlan {
    /// Partner index within the batch and the sample's own weight.
    pub mix: Option<(usize, f64)>,
    pub flip: bool,
    /// `(top, left, side fraction)` of the crop window.
    pub crop: Option<(f64, f64, f64)>,
    pub blur_sigma: Option<f64>,
    pub brightness: f64,
    /// Per-pixel intensity noise.
    pub noise: Option<Vec<f64>>,
}

/// A recorded view and how many of its values were clamped into [0, 1].
pub struct AppliedView {
    pub view: Var,
    pub clamped: usize,
}

/// Per-channel linear map applied identically to both channels.
fn both_channels(h: usize, w: usize, per_pixel: impl Fn(usize, usize, &mut Vec<(usize, f64)>)) -> Arc<SparseMap> {
    let hw = h * w;
    let mut b = SparseMap::builder(CHANNELS * hw);
    let mut entries = Vec::new();
    for ch in 0..CHANNELS {
        for r in 0..h {
            for c in 0..w {
                entries.clear();
                per_pixel(r, c, &mut entries);
                for &(src, wt) in &entries {
                    b.push(ch * hw + src, wt);
                }
                b.end_row();
            }
        }
    }
    Arc::new(b.finish(&[CHANNELS, h, w]))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

impl ViewPlan {
    pub fn identity() -> Self {
        Self {
            mix: None,
            flip: false,
            crop: None,
            blur_sigma: None,
            brightness: 0.0,
            noise: None,
        }
    }

    /// Draws a view for sample `index` of a batch of `batch` samples.
    pub fn sample(
        policy: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
        height: usize,
        width: usize,
        batch: usize,
        index: usize,
    ) -> Self {
        let mut plan = Self::identity();
        if policy.has(Transform::Mixup) && batch > 1 {
            let mut partner = rng.gen_range(0..batch - 1);
            if partner >= index {
                partner += 1;
            }
            plan.mix = Some((partner, draw(rng, policy.mixup_lambda)));
        }
        if policy.has(Transform::HorizontalFlip) {
            plan.flip = rng.gen_bool(policy.flip_prob);
        }
        if policy.has(Transform::CropResize) {
            let s = draw(rng, policy.crop_scale);
            let top = rng.gen_range(0.0..=(1.0 - s)) * height as f64;
            let left = rng.gen_range(0.0..=(1.0 - s)) * width as f64;
            plan.crop = Some((top, left, s));
        }
        if policy.has(Transform::GaussianBlur) {
            plan.blur_sigma = Some(draw(rng, policy.blur_sigma));
        }
        if policy.has(Transform::Brightness) {
            plan.brightness = draw(rng, policy.brightness);
        }
        if policy.has(Transform::AdditiveNoise) {
            let std = draw(rng, policy.noise_std);
            plan.noise = Some(
                (0..height * width)
                    .map(|_| {
                        // Box–Muller
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect(),
            );
        }
        plan
    }

    /// Linear maps applied in order after mixing.
    pub fn geometry(&self, h: usize, w: usize) -> Vec<Arc<SparseMap>> {
        let mut maps = Vec::new();
        if self.flip {
            maps.push(both_channels(h, w, |r, c, e| e.push((r * w + (w - 1 - c), 1.0))));
        }
        if let Some((top, left, s)) = self.crop {
            let (sh, sw) = (s * h as f64, s * w as f64);
            maps.push(both_channels(h, w, |r, c, e| {
                let y = (top + (r as f64 + 0.5) * sh / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let x = (left + (c as f64 + 0.5) * sw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                    for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                        if wy * wx != 0.0 {
                            e.push((yy * w + xx, wy * wx));
                        }
                    }
                }
            }));
        }
        if let Some(sigma) = self.blur_sigma {
            let k = gaussian_kernel(sigma);
            let radius = (k.len() / 2) as isize;
            maps.push(both_channels(h, w, |r, c, e| {
                for (i, &kv) in k.iter().enumerate() {
                    let cc = (c as isize + i as isize - radius).clamp(0, w as isize - 1) as usize;
                    e.push((r * w + cc, kv));
                }
            }));
            maps.push(both_channels(h, w, |r, c, e| {
                for (i, &kv) in k.iter().enumerate() {
                    let rr = (r as isize + i as isize - radius).clamp(0, h as isize - 1) as usize;
                    e.push((rr * w + c, kv));
                }
            }));
        }
        maps
    }

    /// Records the view of `samples[index]` (each a `[2, H, W]` node).
    pub fn apply_on_tape(&self, tape: &mut Tape, samples: &[Var], index: usize) -> Result<AppliedView> {
        let (h, w) = match tape.shape(samples[index]) {
            [2, h, w] => (*h, *w),
            s => return Err(Error::invalid(format!("views need [2, H, W] samples, got {s:?}"))),
        };
        let mut x = samples[index];
        if let Some((partner, lambda)) = self.mix {
            let own = tape.scale(x, lambda);
            let other = tape.scale(samples[partner], 1.0 - lambda);
            x = tape.add(own, other)?;
        }
        for map in self.geometry(h, w) {
            x = tape.sparse(x, map)?;
        }
        if self.brightness != 0.0 || self.noise.is_some() {
            let mut shift = vec![0.0; CHANNELS * h * w];
            for (i, s) in shift[..h * w].iter_mut().enumerate() {
                *s = self.brightness + self.noise.as_ref().map_or(0.0, |n| n[i]);
            }
            let c = tape.constant(Tensor::new(&[CHANNELS, h, w], shift)?);
            x = tape.add(x, c)?;
        }
        let clamped = tape
            .value(x)
            .data()
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count();
        let view = tape.clamp(x, 0.0, 1.0);
        Ok(AppliedView { view, clamped })
    }
}

/// Two independent views of `sample`; `partner` supplies the mixup partner.
/// Deterministic per `(policy.seed, view_seed)`.
pub fn augment(
    sample: &DenoisedSample,
    partner: Option<&DenoisedSample>,
    policy: &AugmentationPolicy,
    view_seed: u64,
) -> Result<(DenoisedSample, DenoisedSample)> {
    let mut rng = seed::rng_at(policy.seed, &[view_seed]);
    let mut tape = Tape::new();
    let mut inputs = vec![tape.constant(sample.stacked())];
    if let Some(p) = partner {
        if (p.height(), p.width()) != (sample.height(), sample.width()) {
            return Err(Error::invalid("mixup partner differs in size"));
        }
        inputs.push(tape.constant(p.stacked()));
    }
    let (h, w) = (sample.height(), sample.width());
    let mut views = Vec::with_capacity(2);
    for _ in 0..2 {
        let plan = ViewPlan::sample(policy, &mut rng, h, w, inputs.len(), 0);
        let v = plan.apply_on_tape(&mut tape, &inputs, 0)?;
        views.push(DenoisedSample::from_stacked(tape.value(v.view), sample.source)?);
    }
    let second = views.pop().unwrap();
    let first = views.pop().unwrap();
    Ok((first, second))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(seed: u64) -> DenoisedSample {
        let mut rng = seed::rng(seed);
        let h = 16;
        DenoisedSample {
            intensity: Tensor::new(&[h, h], (0..h * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            energy: Tensor::new(&[h, h], (0..h * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            source: Some(3),
        }
    }

    #[test]
    fn empty_policy_is_identity() {
        let s = sample(1);
        let (a, b) = augment(&s, None, &AugmentationPolicy::none(), 7).unwrap();
        assert_eq!(a, s);
        assert_eq!(b, s);
    }

    #[test]
    fn views_are_deterministic() {
        let (s, p) = (sample(1), sample(2));
        let pol = AugmentationPolicy::default();
        assert_eq!(augment(&s, Some(&p), &pol, 5).unwrap(), augment(&s, Some(&p), &pol, 5).unwrap());
        assert_ne!(augment(&s, Some(&p), &pol, 5).unwrap(), augment(&s, Some(&p), &pol, 6).unwrap());
    }

    #[test]
    fn the_two_views_differ() {
        let (a, b) = augment(&sample(3), Some(&sample(4)), &AugmentationPolicy::default(), 1).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mixup_combines_energy_the_same_way() {
        let (s, p) = (sample(5), sample(6));
        let (a, _) = augment(&s, Some(&p), &AugmentationPolicy::only(&[Transform::Mixup]), 2).unwrap();
        // recover λ from one intensity value, then check every value
        let i0 = (a.intensity.data()[0] - p.intensity.data()[0]) / (s.intensity.data()[0] - p.intensity.data()[0]);
        for k in 0..s.energy.len() {
            let want = i0 * s.energy.data()[k] + (1.0 - i0) * p.energy.data()[k];
            assert!((a.energy.data()[k] - want).abs() < 1e-9);
        }
        assert!((0.7..=1.0).contains(&i0));
    }

    #[test]
    fn flip_mirrors_columns() {
        let s = sample(7);
        let pol = AugmentationPolicy {
            flip_prob: 1.0,
            ..AugmentationPolicy::only(&[Transform::HorizontalFlip])
        };
        let (a, _) = augment(&s, None, &pol, 0).unwrap();
        assert_eq!(a.intensity.at2(3, 0), s.intensity.at2(3, 15));
        assert_eq!(a.energy.at2(9, 4), s.energy.at2(9, 11));
    }

    #[test]
    fn out_of_bounds_ranges_are_rejected() {
        let pol = AugmentationPolicy {
            blur_sigma: (0.1, 1.0),
            ..Default::default()
        };
        assert!(pol.validate().is_err());
        assert!(AugmentationPolicy::default().validate().is_ok());
    }
}
