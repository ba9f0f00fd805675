//! Central-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Per-coordinate comparison between the analytic and numerical gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// One-sided slopes disagree: the point sits on a kink.
    pub kink: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Human-readable diagnostics (non-finite values, kinks).
    pub diagnostics: Vec<String>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn has_kink(&self) -> bool {
        self.coords.iter().any(|c| c.kink)
    }

    /// Every smooth coordinate within tolerance and no diagnostics about
    /// non-finite values.
    pub fn passed(&self) -> bool {
        !self.diagnostics.iter().any(|d| d.starts_with("non-finite"))
            && self
                .coords
                .iter()
                .all(|c| c.kink || c.rel_error <= self.tolerance)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero gradients from
/// blowing up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    Ok(tape.value(y).item())
}

/// Compares the tape gradient of the scalar function `f` at `point` with
/// central differences of width `2·step`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut report = GradReport {
        tolerance,
        ..Default::default()
    };
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let f0 = tape.value(y).item();
    if !f0.is_finite() {
        report
            .diagnostics
            .push(format!("non-finite function value {f0} at the point"));
        report.max_rel_error = f64::INFINITY;
        report.mean_rel_error = f64::INFINITY;
        return Ok(report);
    }
    let analytic = tape.backward(y)?.get(x);

    let mut total = 0.0;
    let mut smooth = 0usize;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&f, &plus)?;
        let fm = eval(&f, &minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            report
                .diagnostics
                .push(format!("non-finite function value near coordinate {i}"));
            report.coords.push(CoordCheck {
                index: i,
                analytic: analytic.data()[i],
                numeric: f64::NAN,
                rel_error: f64::INFINITY,
                kink: false,
            });
            report.max_rel_error = f64::INFINITY;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let fwd = (fp - f0) / step;
        let bwd = (f0 - fm) / step;
        let kink = (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0);
        let a = analytic.data()[i];
        let rel = relative_error(a, numeric);
        if kink {
            report
                .diagnostics
                .push(format!("non-differentiable point at coordinate {i}"));
        } else {
            report.max_rel_error = report.max_rel_error.max(rel);
            total += rel;
            smooth += 1;
        }
        report.coords.push(CoordCheck {
            index: i,
            analytic: a,
            numeric,
            rel_error: rel,
            kink,
        });
    }
    if smooth > 0 {
        report.mean_rel_error = total / smooth as f64;
    }
    Ok(report)
}
