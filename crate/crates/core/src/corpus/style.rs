//! Writer styles: a handful of scalar habits plus a personal alphabet of
//! pseudo-glyphs built from cubic Bézier strokes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;

pub const GLYPHS_PER_WRITER: usize = 8;

pub const SLANT_RANGE: (f64, f64) = (-25.0, 25.0);
pub const STROKE_WIDTH_RANGE: (f64, f64) = (1.0, 4.0);
pub const JITTER_RANGE: (f64, f64) = (0.0, 0.5);
pub const SPACING_RANGE: (f64, f64) = (2.0, 10.0);
pub const WOBBLE_RANGE: (f64, f64) = (0.0, 3.0);
pub const DARKNESS_RANGE: (f64, f64) = (0.0, 0.4);

/// Point in glyph units: `x` along the line, `y` up from the baseline; one
/// unit is the x-height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlyphPoint {
    pub x: f64,
    pub y: f64,
}

/// Cubic Bézier control polygon.
pub type Stroke = [GlyphPoint; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    /// Horizontal advance in glyph units.
    pub advance: f64,
    /// Main down-stroke followed by a secondary curve.
    pub strokes: [Stroke; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterStyle {
    /// Degrees, positive leans right.
    pub slant: f64,
    /// Pixels.
    pub stroke_width: f64,
    pub curvature_jitter: f64,
    /// Pixels between glyphs.
    pub glyph_spacing: f64,
    /// Baseline wobble amplitude in pixels.
    pub baseline_wobble: f64,
    /// Ink gray level as a fraction of white.
    pub ink_darkness: f64,
    pub style_seed: u64,
    pub glyphs: Vec<Glyph>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

fn sample_glyph(rng: &mut impl Rng) -> Glyph {
    let advance = rng.gen_range(0.55..1.0);
    let top = if rng.gen_bool(0.3) {
        rng.gen_range(1.3..1.6)
    } else {
        rng.gen_range(0.85..1.05)
    };
    let bottom = if rng.gen_bool(0.2) { rng.gen_range(-0.5..-0.3) } else { 0.0 };
    let x0 = rng.gen_range(0.1..0.35) * advance;
    let bend = rng.gen_range(-0.15..0.15);
    let main = [
        GlyphPoint { x: x0, y: top },
        GlyphPoint { x: x0 + bend, y: top - (top - bottom) / 3.0 },
        GlyphPoint { x: x0 - bend, y: bottom + (top - bottom) / 3.0 },
        GlyphPoint { x: x0 + rng.gen_range(-0.05..0.05), y: bottom },
    ];
    let start_y = rng.gen_range(0.2..0.8);
    let second = [
        GlyphPoint { x: x0, y: start_y },
        GlyphPoint {
            x: rng.gen_range(0.5..1.2) * advance,
            y: rng.gen_range(0.6..1.2),
        },
        GlyphPoint {
            x: rng.gen_range(0.5..1.2) * advance,
            y: rng.gen_range(-0.2..0.4),
        },
        GlyphPoint {
            x: rng.gen_range(0.3..0.95) * advance,
            y: rng.gen_range(0.0..0.5),
        },
    ];
    Glyph {
        advance,
        strokes: [main, second],
    }
}

/// Deterministic style for `style_seed`.
pub fn sample_writer(style_seed: u64) -> WriterStyle {
    let mut rng = seed::rng_at(style_seed, &[0x57_59_4c_45]);
    let slant = uniform(&mut rng, SLANT_RANGE);
    let stroke_width = uniform(&mut rng, STROKE_WIDTH_RANGE);
    let curvature_jitter = uniform(&mut rng, JITTER_RANGE);
    let glyph_spacing = uniform(&mut rng, SPACING_RANGE);
    let baseline_wobble = uniform(&mut rng, WOBBLE_RANGE);
    let ink_darkness = uniform(&mut rng, DARKNESS_RANGE);
    let glyphs = (0..GLYPHS_PER_WRITER).map(|_| sample_glyph(&mut rng)).collect();
    WriterStyle {
        slant,
        stroke_width,
        curvature_jitter,
        glyph_spacing,
        baseline_wobble,
        ink_darkness,
        style_seed,
        glyphs,
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    t * a + (1.0 - t) * b
}

impl WriterStyle {
    /// Elementwise `t·self + (1 − t)·other`, glyph control points included.
    /// The seed is taken from whichever side carries more weight.
    pub fn interpolate(&self, other: &WriterStyle, t: f64) -> WriterStyle {
        let glyphs = self
            .glyphs
            .iter()
            .zip(&other.glyphs)
            .map(|(a, b)| {
                let mut strokes = a.strokes;
                for (s, (sa, sb)) in strokes.iter_mut().zip(a.strokes.iter().zip(&b.strokes)) {
                    for (p, (pa, pb)) in s.iter_mut().zip(sa.iter().zip(sb)) {
                        p.x = lerp(pa.x, pb.x, t);
                        p.y = lerp(pa.y, pb.y, t);
                    }
                }
                Glyph {
                    advance: lerp(a.advance, b.advance, t),
                    strokes,
                }
            })
            .collect();
        WriterStyle {
            slant: lerp(self.slant, other.slant, t),
            stroke_width: lerp(self.stroke_width, other.stroke_width, t),
            curvature_jitter: lerp(self.curvature_jitter, other.curvature_jitter, t),
            glyph_spacing: lerp(self.glyph_spacing, other.glyph_spacing, t),
            baseline_wobble: lerp(self.baseline_wobble, other.baseline_wobble, t),
            ink_darkness: lerp(self.ink_darkness, other.ink_darkness, t),
            style_seed: if t >= 0.5 { self.style_seed } else { other.style_seed },
            glyphs,
        }
    }

    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        within(self.slant, SLANT_RANGE)
            && within(self.stroke_width, STROKE_WIDTH_RANGE)
            && within(self.curvature_jitter, JITTER_RANGE)
            && within(self.glyph_spacing, SPACING_RANGE)
            && within(self.baseline_wobble, WOBBLE_RANGE)
            && within(self.ink_darkness, DARKNESS_RANGE)
    }
}
