//! Learnable spectral denoiser with a per-pixel handwriting-energy head.
//!
//! An image is band-filtered in the Fourier domain, each pixel gets an
//! energy in [0, 1] from a logistic head over its deviation from the page
//! background and its local variance, and low-energy pixels are replaced by
//! the background. The result is a two-channel sample (intensity, energy).

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tape::logistic;
use crate::numerics::{RadialBands, SparseMap, Tape, Tensor, Var};

pub const BANDS: usize = 16;
/// Gain logits are clamped to this magnitude.
pub const LOGIT_CAP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyOperator {
    /// Unconstrained band gains; the effective gain is their logistic.
    pub gain_logits: Vec<f64>,
    pub bias: f64,
    pub deviation_weight: f64,
    pub variance_weight: f64,
    pub threshold: f64,
    /// Weight of the total-variation term on the energy map.
    pub smoothness: f64,
    /// Weight of the energy-weighted fidelity term.
    pub fidelity: f64,
}

impl Default for EnergyOperator {
    fn default() -> Self {
        Self {
            gain_logits: vec![3.0; BANDS],
            bias: -4.0,
            deviation_weight: 10.0,
            variance_weight: 10.0,
            threshold: 0.5,
            smoothness: 0.1,
            fidelity: 1.0,
        }
    }
}

impl EnergyOperator {
    pub fn validate(&self) -> Result<()> {
        if self.gain_logits.is_empty() {
            return Err(Error::invalid("operator needs at least one band"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.smoothness < 0.0 || self.fidelity < 0.0 {
            return Err(Error::invalid("smoothness and fidelity weights must be non-negative"));
        }
        let all = self
            .gain_logits
            .iter()
            .chain([&self.bias, &self.deviation_weight, &self.variance_weight]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("operator parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn gains(&self) -> Vec<f64> {
        self.gain_logits.iter().map(|&l| logistic(l)).collect()
    }

    pub fn bands(&self) -> usize {
        self.gain_logits.len()
    }

    /// Places the trainable parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> OperatorVars {
        let mut leaf = |t: Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        OperatorVars {
            gain_logits: leaf(Tensor::vector(self.gain_logits.clone())),
            bias: leaf(Tensor::scalar(self.bias)),
            deviation_weight: leaf(Tensor::scalar(self.deviation_weight)),
            variance_weight: leaf(Tensor::scalar(self.variance_weight)),
        }
    }

    fn clamp_logits(&mut self) {
        for l in &mut self.gain_logits {
            *l = l.clamp(-LOGIT_CAP, LOGIT_CAP);
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OperatorVars {
    pub gain_logits: Var,
    pub bias: Var,
    pub deviation_weight: Var,
    pub variance_weight: Var,
}

/// Tape handles for one denoised image.
#[derive(Debug, Clone, Copy)]
pub struct DenoisedVars {
    pub filtered: Var,
    pub energy: Var,
    /// `[2, H, W]`: thresholded intensity then energy.
    pub sample: Var,
}

/// Two-channel output of the operator.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisedSample {
    pub intensity: Tensor,
    pub energy: Tensor,
    pub source: Option<usize>,
}

impl DenoisedSample {
    pub fn height(&self) -> usize {
        self.intensity.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.intensity.shape()[1]
    }

    /// `[2, H, W]` stacking of both channels.
    pub fn stacked(&self) -> Tensor {
        let mut data = self.intensity.data().to_vec();
        data.extend_from_slice(self.energy.data());
        Tensor::new(&[2, self.height(), self.width()], data).expect("channels share a shape")
    }

    pub fn from_stacked(t: &Tensor, source: Option<usize>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [2, h, w] => (*h, *w),
            s => return Err(Error::invalid(format!("expected a [2, H, W] sample, got {s:?}"))),
        };
        let (a, b) = t.data().split_at(h * w);
        Ok(Self {
            intensity: Tensor::new(&[h, w], a.to_vec())?,
            energy: Tensor::new(&[h, w], b.to_vec())?,
            source,
        })
    }
}

/// Sample used when the operator is switched off: raw intensity with unit
/// energy everywhere.
pub fn passthrough(image: &Tensor, source: Option<usize>) -> DenoisedSample {
    DenoisedSample {
        intensity: image.clone(),
        energy: Tensor::filled(image.shape(), 1.0),
        source,
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::invalid(format!("expected an H×W image, got {s:?}"))),
    }
}

/// Records the filter, energy head and thresholding of `image` on `tape`.
pub fn denoise_on_tape(
    tape: &mut Tape,
    image: Var,
    vars: &OperatorVars,
    bands: &Arc<RadialBands>,
    threshold: f64,
) -> Result<DenoisedVars> {
    let (h, w) = dims(tape.value(image))?;
    let gains = tape.sigmoid(vars.gain_logits);
    let filtered = tape.spectral_filter(image, gains, bands.clone())?;
    let background = tape.median(filtered)?;
    let neg_bg = tape.scale(background, -1.0);
    let centered = tape.add_scalar(filtered, neg_bg)?;
    let deviation = tape.abs(centered);
    let variance = tape.local_var3(filtered)?;
    let a = tape.scale_by(deviation, vars.deviation_weight)?;
    let b = tape.scale_by(variance, vars.variance_weight)?;
    let z = tape.add(a, b)?;
    let z = tape.add_scalar(z, vars.bias)?;
    let energy = tape.sigmoid(z);
    let keep: Vec<bool> = tape.value(energy).data().iter().map(|&e| e >= threshold).collect();
    let kept = tape.select(filtered, background, Arc::new(keep))?;
    let kept = tape.clamp(kept, 0.0, 1.0);
    let c0 = tape.reshape(kept, &[1, h, w])?;
    let c1 = tape.reshape(energy, &[1, h, w])?;
    let sample = tape.concat(&[c0, c1])?;
    Ok(DenoisedVars {
        filtered,
        energy,
        sample,
    })
}

/// Band-filtered image: `mean + ifft2(M ⊙ fft2(image − mean))`.
pub fn spectral_filter(image: &Tensor, op: &EnergyOperator) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let g = tape.constant(Tensor::vector(op.gains()));
    let y = tape.spectral_filter(x, g, Arc::new(RadialBands::new(h, w, op.bands())))?;
    Ok(tape.value(y).clone())
}

/// Energy of every pixel of an already filtered image.
pub fn energy_map(filtered: &Tensor, op: &EnergyOperator) -> Result<Tensor> {
    dims(filtered)?;
    let mut tape = Tape::new();
    let f = tape.constant(filtered.clone());
    let vars = op.bind(&mut tape, false);
    let bg = tape.median(f)?;
    let neg = tape.scale(bg, -1.0);
    let c = tape.add_scalar(f, neg)?;
    let dev = tape.abs(c);
    let var = tape.local_var3(f)?;
    let a = tape.scale_by(dev, vars.deviation_weight)?;
    let b = tape.scale_by(var, vars.variance_weight)?;
    let z = tape.add(a, b)?;
    let z = tape.add_scalar(z, vars.bias)?;
    let e = tape.sigmoid(z);
    Ok(tape.value(e).clone())
}

pub fn apply_operator(image: &Tensor, op: &EnergyOperator, source: Option<usize>) -> Result<DenoisedSample> {
    let (h, w) = dims(image)?;
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let vars = op.bind(&mut tape, false);
    let bands = Arc::new(RadialBands::new(h, w, op.bands()));
    let d = denoise_on_tape(&mut tape, x, &vars, &bands, op.threshold)?;
    DenoisedSample::from_stacked(tape.value(d.sample), source)
}

/// Vertical then horizontal neighbour differences of an `H×W` field.
pub fn difference_map(h: usize, w: usize) -> SparseMap {
    let mut b = SparseMap::builder(h * w);
    for r in 0..h.saturating_sub(1) {
        for c in 0..w {
            b.push(r * w + c, -1.0);
            b.push((r + 1) * w + c, 1.0);
            b.end_row();
        }
    }
    for r in 0..h {
        for c in 0..w.saturating_sub(1) {
            b.push(r * w + c, -1.0);
            b.push(r * w + c + 1, 1.0);
            b.end_row();
        }
    }
    let rows = h.saturating_sub(1) * w + h * w.saturating_sub(1);
    b.finish(&[rows])
}

/// Anisotropic total variation divided by the pixel count.
pub fn total_variation(tape: &mut Tape, field: Var, diffs: &Arc<SparseMap>) -> Result<Var> {
    let n = tape.value(field).len() as f64;
    if diffs.out_len() == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let d = tape.sparse(field, diffs.clone())?;
    let a = tape.abs(d);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / n))
}

/// Per-batch tape handles produced by [`record_batch`].
pub struct RecordedBatch {
    pub vars: OperatorVars,
    pub images: Vec<Var>,
    pub denoised: Vec<DenoisedVars>,
}

/// Denoises every image on one tape with shared operator parameters.
pub fn record_batch(tape: &mut Tape, op: &EnergyOperator, images: &[Tensor], trainable: bool) -> Result<RecordedBatch> {
    let (h, w) = dims(images.first().ok_or_else(|| Error::invalid("empty batch"))?)?;
    let bands = Arc::new(RadialBands::new(h, w, op.bands()));
    let vars = op.bind(tape, trainable);
    let mut vs = Vec::with_capacity(images.len());
    let mut ds = Vec::with_capacity(images.len());
    for img in images {
        if dims(img)? != (h, w) {
            return Err(Error::invalid("batch images differ in size"));
        }
        let x = tape.constant(img.clone());
        ds.push(denoise_on_tape(tape, x, &vars, &bands, op.threshold)?);
        vs.push(x);
    }
    Ok(RecordedBatch {
        vars,
        images: vs,
        denoised: ds,
    })
}

/// `μ_R · mean TV(E) + μ_D · mean((filtered − image)² · E)` over the batch.
pub fn regularizer(tape: &mut Tape, op: &EnergyOperator, batch: &RecordedBatch) -> Result<Var> {
    let n = batch.images.len() as f64;
    let (h, w) = dims(tape.value(batch.images[0]))?;
    let diffs = Arc::new(difference_map(h, w));
    let mut total: Option<Var> = None;
    for (&img, d) in batch.images.iter().zip(&batch.denoised) {
        let tv = total_variation(tape, d.energy, &diffs)?;
        let tv = tape.scale(tv, op.smoothness / n);
        let diff = tape.sub(d.filtered, img)?;
        let sq = tape.square(diff);
        let weighted = tape.mul(sq, d.energy)?;
        let fid = tape.mean(weighted);
        let fid = tape.scale(fid, op.fidelity / n);
        let term = tape.add(tv, fid)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("batch is non-empty"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorGrads {
    pub gain_logits: Vec<f64>,
    pub bias: f64,
    pub deviation_weight: f64,
    pub variance_weight: f64,
}

impl OperatorGrads {
    pub fn is_finite(&self) -> bool {
        self.gain_logits.iter().all(|v| v.is_finite())
            && self.bias.is_finite()
            && self.deviation_weight.is_finite()
            && self.variance_weight.is_finite()
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grads: OperatorGrads,
}

/// Evaluates `pretrain_loss(samples) + regularizer` with gradients for the
/// operator parameters. `pretrain_loss` receives the `[2, H, W]` sample
/// nodes and must treat any model parameters as constants.
pub fn operator_objective<F>(op: &EnergyOperator, images: &[Tensor], pretrain_loss: F) -> Result<ObjectiveEval>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    if images.is_empty() {
        return Err(Error::invalid("operator objective needs a non-empty batch"));
    }
    let mut tape = Tape::new();
    let batch = record_batch(&mut tape, op, images, true)?;
    let samples: Vec<Var> = batch.denoised.iter().map(|d| d.sample).collect();
    let main = pretrain_loss(&mut tape, &samples)?;
    let reg = regularizer(&mut tape, op, &batch)?;
    let total = tape.add(main, reg)?;
    let g = tape.backward(total)?;
    Ok(ObjectiveEval {
        value: tape.value(total).item(),
        grads: OperatorGrads {
            gain_logits: g.get(batch.vars.gain_logits).into_data(),
            bias: g.get(batch.vars.bias).item(),
            deviation_weight: g.get(batch.vars.deviation_weight).item(),
            variance_weight: g.get(batch.vars.variance_weight).item(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct OperatorUpdate {
    pub operator: EnergyOperator,
    pub objective: f64,
    /// Set when the step was skipped; explains why.
    pub diagnostic: Option<String>,
}

/// One gradient-descent step of size `rate` on [`operator_objective`].
pub fn update_operator<F>(op: &EnergyOperator, images: &[Tensor], pretrain_loss: F, rate: f64) -> Result<OperatorUpdate>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = operator_objective(op, images, pretrain_loss)?;
    if !eval.value.is_finite() || !eval.grads.is_finite() {
        return Ok(OperatorUpdate {
            operator: op.clone(),
            objective: eval.value,
            diagnostic: Some("non-finite operator gradient; step skipped".into()),
        });
    }
    let mut next = op.clone();
    for (l, g) in next.gain_logits.iter_mut().zip(&eval.grads.gain_logits) {
        *l -= rate * g;
    }
    next.bias -= rate * eval.grads.bias;
    next.deviation_weight -= rate * eval.grads.deviation_weight;
    next.variance_weight -= rate * eval.grads.variance_weight;
    next.clamp_logits();
    Ok(OperatorUpdate {
        operator: next,
        objective: eval.value,
        diagnostic: None,
    })
}

const EMAP_MAGIC: &[u8; 4] = b"EMAP";
const EMAP_VERSION: u32 = 1;

/// Energy map as `"EMAP", u32 version, u32 H, u32 W` then float32 values,
/// all little-endian.
pub fn write_emap<W: Write>(energy: &Tensor, mut out: W) -> Result<()> {
    let (h, w) = dims(energy)?;
    let mut buf = Vec::with_capacity(16 + 4 * h * w);
    buf.extend_from_slice(EMAP_MAGIC);
    buf.extend_from_slice(&EMAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for &v in energy.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
        .map_err(|e| Error::Format(format!("writing energy map: {e}")))
}

pub fn read_emap<R: Read>(mut input: R) -> Result<Tensor> {
    let mut hdr = [0u8; 16];
    input
        .read_exact(&mut hdr)
        .map_err(|e| Error::Format(format!("energy map header: {e}")))?;
    if &hdr[0..4] != EMAP_MAGIC {
        return Err(Error::Format("not an energy map".into()));
    }
    let word = |i: usize| u32::from_le_bytes(hdr[i..i + 4].try_into().unwrap());
    if word(4) != EMAP_VERSION {
        return Err(Error::Format(format!("energy map version {}", word(4))));
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let mut raw = vec![0u8; 4 * h * w];
    input
        .read_exact(&mut raw)
        .map_err(|e| Error::Format(format!("energy map payload: {e}")))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(&[h, w], data)
}

pub fn save_emap(energy: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_emap(energy, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_emap(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_emap(&bytes[..])
}
