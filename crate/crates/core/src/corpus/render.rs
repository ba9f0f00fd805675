//! Rasterizes a writer style onto a page.

use rand::seq::SliceRandom;
use rand::Rng;

use super::pgm::GrayImage;
use super::style::{GlyphPoint, WriterStyle};
use super::Page;
use crate::error::{Error, Result};
use crate::seed;

/// Pixels per glyph unit.
const X_HEIGHT: f64 = 10.0;
const MARGIN: f64 = 3.0;
const INK_CAP: f64 = 0.22;
const MIN_SIDE: usize = 32;

/// A rendered page together with its per-pixel ink coverage in [0, 1].
pub struct Rendering {
    pub page: Page,
    pub coverage: Vec<f32>,
}

impl Rendering {
    /// Pixels where the stroke dominates.
    pub fn ink_mask(&self) -> Vec<bool> {
        self.coverage.iter().map(|&c| c > 0.5).collect()
    }
}

fn bezier(p: &[GlyphPoint; 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].x + b * p[1].x + c * p[2].x + d * p[3].x,
        a * p[0].y + b * p[1].y + c * p[2].y + d * p[3].y,
    )
}

struct Canvas {
    height: usize,
    width: usize,
    coverage: Vec<f32>,
}

impl Canvas {
    /// Anti-aliased disk of radius `r` centred at `(x, y)`; coverage combines
    /// by maximum.
    fn stamp(&mut self, x: f64, y: f64, r: f64) {
        let reach = r + 1.0;
        let r0 = ((y - reach).floor().max(0.0)) as usize;
        let r1 = ((y + reach).ceil().min(self.height as f64 - 1.0)).max(-1.0);
        let c0 = ((x - reach).floor().max(0.0)) as usize;
        let c1 = ((x + reach).ceil().min(self.width as f64 - 1.0)).max(-1.0);
        if r1 < 0.0 || c1 < 0.0 {
            return;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let d = ((row as f64 + 0.5 - y).powi(2) + (col as f64 + 0.5 - x).powi(2)).sqrt();
                let cov = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
                let slot = &mut self.coverage[row * self.width + col];
                if cov > *slot {
                    *slot = cov;
                }
            }
        }
    }

    fn stroke(&mut self, pts: &[GlyphPoint; 4], r: f64) {
        let poly: f64 = pts
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .sum();
        let steps = ((poly / 0.25).ceil() as usize).max(2);
        for i in 0..=steps {
            let (x, y) = bezier(pts, i as f64 / steps as f64);
            self.stamp(x, y, r);
        }
    }
}

fn compose(paper: &[u8], coverage: &[f32], ink: f64) -> Vec<u8> {
    paper
        .iter()
        .zip(coverage)
        .map(|(&bg, &c)| {
            let c = c as f64;
            (bg as f64 * (1.0 - c) + ink * c).round() as u8
        })
        .collect()
}

fn ink_count(paper: &[u8], coverage: &[f32], ink: f64) -> usize {
    paper
        .iter()
        .zip(coverage)
        .filter(|(&bg, &c)| {
            let c = c as f64;
            ((bg as f64 * (1.0 - c) + ink * c).round() as u8) < 128
        })
        .count()
}

/// Renders glyph rows for `style` and returns the page with its coverage.
pub fn render_with_ink(style: &WriterStyle, render_seed: u64, height: usize, width: usize) -> Result<Rendering> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::invalid(format!(
            "page must be at least {MIN_SIDE}×{MIN_SIDE}, got {height}×{width}"
        )));
    }
    let mut rng = seed::rng(render_seed);
    let paper: Vec<u8> = (0..height * width).map(|_| 255 - rng.gen_range(1..=6u8)).collect();
    let mut canvas = Canvas {
        height,
        width,
        coverage: vec![0.0; height * width],
    };
    let ink = style.ink_darkness * 255.0;
    let radius = 0.5 * (style.stroke_width + 1.0);
    let shear = style.slant.to_radians().tan();
    let cap = (INK_CAP * (height * width) as f64) as usize;
    let pitch = X_HEIGHT * 1.6 + style.stroke_width;
    let mut baseline = MARGIN + X_HEIGHT * 1.2;
    let mut order: Vec<usize> = (0..style.glyphs.len()).collect();
    'lines: while baseline < height as f64 - 2.0 {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let period = rng.gen_range(20.0..40.0);
        let mut x = MARGIN + rng.gen_range(0.0..style.glyph_spacing) - shear * X_HEIGHT * 0.5;
        while x < width as f64 - MARGIN {
            order.shuffle(&mut rng);
            let glyph = &style.glyphs[order[0]];
            let before = canvas.coverage.clone();
            for stroke in &glyph.strokes {
                let mut pts = *stroke;
                for p in pts.iter_mut() {
                    p.x += rng.gen_range(-1.0..=1.0) * style.curvature_jitter * 0.25;
                    p.y += rng.gen_range(-1.0..=1.0) * style.curvature_jitter * 0.25;
                }
                let placed = pts.map(|p| {
                    let px = x + p.x * X_HEIGHT + p.y * X_HEIGHT * shear;
                    let wobble = style.baseline_wobble * (std::f64::consts::TAU * px / period + phase).sin();
                    GlyphPoint {
                        x: px,
                        y: baseline - p.y * X_HEIGHT + wobble,
                    }
                });
                canvas.stroke(&placed, radius);
            }
            if ink_count(&paper, &canvas.coverage, ink) > cap {
                canvas.coverage = before;
                break 'lines;
            }
            x += glyph.advance * X_HEIGHT + style.glyph_spacing;
        }
        baseline += pitch;
    }
    let image = GrayImage::new(height, width, compose(&paper, &canvas.coverage, ink))?;
    Ok(Rendering {
        page: Page::genuine(image, render_seed),
        coverage: canvas.coverage,
    })
}

/// Deterministic page for `(style, render_seed, height, width)`.
pub fn render_page(style: &WriterStyle, render_seed: u64, height: usize, width: usize) -> Result<Page> {
    render_with_ink(style, render_seed, height, width).map(|r| r.page)
}

#[cfg(test)]
mod tests {
    use super::super::style::sample_writer;
    use super::*;

    #[test]
    fn rendering_is_deterministic() {
        let s = sample_writer(3);
        let a = render_page(&s, 9, 64, 64).unwrap();
        let b = render_page(&s, 9, 64, 64).unwrap();
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn small_pages_are_rejected() {
        assert!(render_page(&sample_writer(1), 1, 31, 64).is_err());
    }

    #[test]
    fn ink_fraction_within_bounds_over_many_styles() {
        for s in 0..300u64 {
            let style = sample_writer(s);
            let page = render_page(&style, s ^ 0xabc, 64, 64).unwrap();
            let f = page.image.ink_fraction();
            assert!((0.02..=0.25).contains(&f), "seed {s}: ink fraction {f}");
        }
    }

    #[test]
    fn paper_is_never_pure_white() {
        let page = render_page(&sample_writer(5), 5, 32, 32).unwrap();
        assert!(page.image.pixels.iter().all(|&p| p < 255));
    }
}
