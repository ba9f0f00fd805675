//! Patch encoder, online heads, momentum heads and the EMA update.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SparseMap, Tape, Tensor, Var};
use crate::patching::{PatchSequence, CHANNELS};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    ConvSmall,
    VitTiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: EncoderVariant,
    /// Representation width `d`.
    pub embed_dim: usize,
    /// Embedding width `d'`.
    pub out_dim: usize,
    /// Widths of the first three conv blocks; the fourth has `embed_dim`.
    pub conv_channels: Vec<usize>,
    pub vit_blocks: usize,
    /// Give the momentum branch its own EMA copy of the encoder.
    pub mirror_encoder: bool,
    pub ema: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::ConvSmall,
            embed_dim: 64,
            out_dim: 32,
            conv_channels: vec![4, 8, 16],
            vit_blocks: 2,
            mirror_encoder: false,
            ema: 0.99,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("model.embed_dim and model.out_dim must be positive"));
        }
        if self.conv_channels.len() != 3 || self.conv_channels.contains(&0) {
            return Err(Error::invalid("model.conv_channels must list three positive widths"));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::invalid(format!("model.ema = {} must lie in [0, 1]", self.ema)));
        }
        Ok(())
    }
}

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some((_, slot)) => *slot = t,
            None => self.entries.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// The subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Params {
        Params {
            entries: self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for a [`Params`] set, in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::InvalidState(format!("parameter {name} is not bound")))
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-a..=a)).collect()).expect("shape matches")
}

fn add_affine(p: &mut Params, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    p.insert(format!("{name}.w"), glorot(rng, &[fan_in, fan_out], fan_in, fan_out));
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn add_norm(p: &mut Params, name: &str, width: usize) {
    p.insert(format!("{name}.g"), Tensor::filled(&[width], 1.0));
    p.insert(format!("{name}.b"), Tensor::zeros(&[width]));
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub patch: usize,
    /// Patches per sample.
    pub patches: usize,
    pub encoder: Params,
    /// Patch head `pat.*`, projection `pro*` and prediction `pre*`.
    pub online: Params,
    /// Patch head and projection, mirroring the online names.
    pub momentum: Params,
    pub momentum_encoder: Option<Params>,
}

/// Number of conv blocks that end in a 2×2 pooling for patch side `p`.
fn pooled_blocks(p: usize) -> usize {
    let mut side = p;
    let mut n = 0;
    while n < 4 && side.is_multiple_of(2) && side > 1 {
        side /= 2;
        n += 1;
    }
    n
}

pub fn init_params(seed_value: u64, config: &ModelConfig, patch: usize, patches: usize) -> Result<ModelState> {
    config.validate()?;
    if patch == 0 || patches == 0 {
        return Err(Error::invalid("patch size and patch count must be positive"));
    }
    let mut rng = seed::rng(seed_value);
    let d = config.embed_dim;
    let mut encoder = Params::new();
    match config.variant {
        EncoderVariant::ConvSmall => {
            let widths = [config.conv_channels[0], config.conv_channels[1], config.conv_channels[2], d];
            let mut c_in = CHANNELS;
            for (i, &c_out) in widths.iter().enumerate() {
                encoder.insert(format!("enc.conv{i}.w"), glorot(&mut rng, &[c_out, c_in, 3, 3], c_in * 9, c_out * 9));
                encoder.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[c_out]));
                c_in = c_out;
            }
        }
        EncoderVariant::VitTiny => {
            let token = CHANNELS * patch * patch;
            add_affine(&mut encoder, &mut rng, "enc.embed", token, d);
            let a = 0.02;
            encoder.insert(
                "enc.pos",
                Tensor::new(&[patches, d], (0..patches * d).map(|_| rng.gen_range(-a..=a)).collect())?,
            );
            for b in 0..config.vit_blocks {
                add_norm(&mut encoder, &format!("enc.blk{b}.ln1"), d);
                for m in ["q", "k", "v", "o"] {
                    add_affine(&mut encoder, &mut rng, &format!("enc.blk{b}.{m}"), d, d);
                }
                add_norm(&mut encoder, &format!("enc.blk{b}.ln2"), d);
                add_affine(&mut encoder, &mut rng, &format!("enc.blk{b}.fc1"), d, 2 * d);
                add_affine(&mut encoder, &mut rng, &format!("enc.blk{b}.fc2"), 2 * d, d);
            }
            add_norm(&mut encoder, "enc.ln", d);
        }
    }
    let mut online = Params::new();
    add_affine(&mut online, &mut rng, "pat", d, d);
    for i in 0..2 {
        add_affine(&mut online, &mut rng, &format!("pro{i}"), d, d);
        add_norm(&mut online, &format!("pro{i}.ln"), d);
    }
    add_affine(&mut online, &mut rng, "pro2", d, config.out_dim);
    add_affine(&mut online, &mut rng, "pre0", config.out_dim, d);
    add_norm(&mut online, "pre0.ln", d);
    add_affine(&mut online, &mut rng, "pre1", d, config.out_dim);
    let mut momentum = online.with_prefix("pat");
    for (n, t) in online.with_prefix("pro").iter() {
        momentum.insert(n, t.clone());
    }
    let momentum_encoder = config.mirror_encoder.then(|| encoder.clone());
    Ok(ModelState {
        config: config.clone(),
        patch,
        patches,
        encoder,
        online,
        momentum,
        momentum_encoder,
    })
}

fn ema_value(k: f64, q: f64, m: f64) -> f64 {
    if m == 1.0 {
        k
    } else if m == 0.0 {
        q
    } else {
        (m * k + (1.0 - m) * q).clamp(k.min(q), k.max(q))
    }
}

fn ema_into(target: &mut Params, source: &Params, m: f64) -> Result<()> {
    for (name, k) in target.iter_mut() {
        let q = source
            .get(name)
            .ok_or_else(|| Error::InvalidState(format!("no online counterpart for {name}")))?;
        if q.shape() != k.shape() {
            return Err(Error::InvalidState(format!("shape mismatch for {name}")));
        }
        for (a, &b) in k.data_mut().iter_mut().zip(q.data()) {
            *a = ema_value(*a, b, m);
        }
    }
    Ok(())
}

impl ModelState {
    pub fn token_len(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite()
            && self.online.is_finite()
            && self.momentum.is_finite()
            && self.momentum_encoder.as_ref().is_none_or(|p| p.is_finite())
    }

    /// `k ← m·k + (1−m)·q` for every momentum parameter.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::invalid(format!("EMA coefficient {m} outside [0, 1]")));
        }
        ema_into(&mut self.momentum, &self.online, m)?;
        if let Some(me) = &mut self.momentum_encoder {
            ema_into(me, &self.encoder, m)?;
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.bind(tape, trainable),
            online: self.online.bind(tape, trainable),
            momentum: self.momentum.bind(tape, false),
            momentum_encoder: self.momentum_encoder.as_ref().map(|p| p.bind(tape, false)),
        }
    }

    /// Representations of one patch sequence, `[M, d]`.
    pub fn encode_sequence(&self, seq: &PatchSequence) -> Result<Tensor> {
        if seq.patch != self.patch || seq.patches.row_len() != self.token_len() {
            return Err(Error::invalid(format!(
                "patches of side {} do not fit an encoder built for side {}",
                seq.patch, self.patch
            )));
        }
        let mut tape = Tape::new();
        let b = self.encoder.bind(&mut tape, false);
        let x = tape.constant(seq.patches.reshaped(&[seq.len(), CHANNELS, seq.patch, seq.patch])?);
        let z = encode(&mut tape, &self.config, &b, x, seq.len())?;
        Ok(tape.value(z).clone())
    }
}

pub struct BoundModel {
    pub encoder: Bound,
    pub online: Bound,
    pub momentum: Bound,
    pub momentum_encoder: Option<Bound>,
}

fn affine(t: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = t.matmul(x, p.var(&format!("{name}.w"))?)?;
    t.add_row(y, p.var(&format!("{name}.b"))?)
}

fn norm(t: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = t.layer_norm_rows(x)?;
    let y = t.mul_row(y, p.var(&format!("{name}.g"))?)?;
    t.add_row(y, p.var(&format!("{name}.b"))?)
}

/// Subtracts the mean of every channel of every patch.
fn center_channels(t: &mut Tape, x: Var, n: usize, patch: usize) -> Result<Var> {
    let area = patch * patch;
    let rows = t.reshape(x, &[n * CHANNELS, area])?;
    let avg = t.constant(Tensor::filled(&[area, 1], 1.0 / area as f64));
    let ones = t.constant(Tensor::filled(&[1, area], 1.0));
    let mean = t.matmul(rows, avg)?;
    let spread = t.matmul(mean, ones)?;
    let centered = t.sub(rows, spread)?;
    t.reshape(centered, &[n, CHANNELS, patch, patch])
}

/// Encodes `x: [N, 2, P, P]` patches (in groups of `group` per sample) into
/// `[N, d]`.
pub fn encode(t: &mut Tape, config: &ModelConfig, p: &Bound, x: Var, group: usize) -> Result<Var> {
    let (n, patch) = match t.shape(x) {
        [n, c, a, b] if *c == CHANNELS && a == b => (*n, *a),
        s => return Err(Error::invalid(format!("encoder input must be [N, 2, P, P], got {s:?}"))),
    };
    let x = center_channels(t, x, n, patch)?;
    match config.variant {
        EncoderVariant::ConvSmall => {
            let pools = pooled_blocks(patch);
            let mut h = x;
            for i in 0..4 {
                h = t.conv2d(h, p.var(&format!("enc.conv{i}.w"))?, p.var(&format!("enc.conv{i}.b"))?)?;
                h = t.relu(h);
                if i < pools {
                    h = t.avg_pool2(h)?;
                }
            }
            t.global_avg_pool(h)
        }
        EncoderVariant::VitTiny => {
            if group == 0 || n % group != 0 {
                return Err(Error::invalid(format!("{n} patches do not split into groups of {group}")));
            }
            let d = config.embed_dim;
            let tokens = t.reshape(x, &[n, CHANNELS * patch * patch])?;
            let mut h = affine(t, p, "enc.embed", tokens)?;
            let tile = tile_rows(group, n / group, d);
            let pos = t.sparse(p.var("enc.pos")?, tile)?;
            h = t.add(h, pos)?;
            let scale = 1.0 / (d as f64).sqrt();
            for b in 0..config.vit_blocks {
                let blk = format!("enc.blk{b}");
                let a = norm(t, p, &format!("{blk}.ln1"), h)?;
                let q = affine(t, p, &format!("{blk}.q"), a)?;
                let k = affine(t, p, &format!("{blk}.k"), a)?;
                let v = affine(t, p, &format!("{blk}.v"), a)?;
                let mut outs = Vec::with_capacity(n / group);
                for s in 0..n / group {
                    let qs = t.slice_rows(q, s * group, group)?;
                    let ks = t.slice_rows(k, s * group, group)?;
                    let vs = t.slice_rows(v, s * group, group)?;
                    let logits = t.matmul_nt(qs, ks)?;
                    let logits = t.scale(logits, scale);
                    let att = t.softmax_rows(logits)?;
                    outs.push(t.matmul(att, vs)?);
                }
                let mixed = t.concat(&outs)?;
                let o = affine(t, p, &format!("{blk}.o"), mixed)?;
                h = t.add(h, o)?;
                let a = norm(t, p, &format!("{blk}.ln2"), h)?;
                let f = affine(t, p, &format!("{blk}.fc1"), a)?;
                let f = t.relu(f);
                let f = affine(t, p, &format!("{blk}.fc2"), f)?;
                h = t.add(h, f)?;
            }
            norm(t, p, "enc.ln", h)
        }
    }
}

/// `[group, d] → [copies·group, d]` by repetition.
fn tile_rows(group: usize, copies: usize, d: usize) -> Arc<SparseMap> {
    let mut b = SparseMap::builder(group * d);
    for _ in 0..copies {
        for i in 0..group * d {
            b.push(i, 1.0);
            b.end_row();
        }
    }
    Arc::new(b.finish(&[copies * group, d]))
}

pub struct OnlineOutput {
    pub pooled: Var,
    pub projection: Var,
    pub prediction: Var,
}

fn project(t: &mut Tape, p: &Bound, pooled: Var) -> Result<Var> {
    let mut h = affine(t, p, "pat", pooled)?;
    for i in 0..2 {
        h = affine(t, p, &format!("pro{i}"), h)?;
        h = norm(t, p, &format!("pro{i}.ln"), h)?;
        h = t.relu(h);
    }
    affine(t, p, "pro2", h)
}

/// Weighted pooling of `z: [B·L, d]` with `weights` (`B·L`, a simplex per
/// sample), then the patch head, projection and prediction.
pub fn forward_online(t: &mut Tape, m: &BoundModel, z: Var, weights: Arc<Vec<f64>>, group: usize) -> Result<OnlineOutput> {
    if weights.len() != t.shape(z)[0] {
        return Err(Error::invalid(format!(
            "{} weights for {} patch representations",
            weights.len(),
            t.shape(z)[0]
        )));
    }
    let pooled = t.pool_rows(z, weights, group)?;
    let projection = project(t, &m.online, pooled)?;
    let h = affine(t, &m.online, "pre0", projection)?;
    let h = norm(t, &m.online, "pre0.ln", h)?;
    let h = t.relu(h);
    let prediction = affine(t, &m.online, "pre1", h)?;
    Ok(OnlineOutput {
        pooled,
        projection,
        prediction,
    })
}

/// Uniform pooling through the momentum patch head and projection.
pub fn forward_momentum(t: &mut Tape, m: &BoundModel, z: Var, group: usize) -> Result<Var> {
    let rows = t.shape(z)[0];
    let pooled = t.pool_rows(z, Arc::new(vec![1.0 / group as f64; rows]), group)?;
    project(t, &m.momentum, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            out_dim: 4,
            conv_channels: vec![2, 3, 4],
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(1, &small(), 4, 4).unwrap();
        assert_eq!(a, init_params(1, &small(), 4, 4).unwrap());
        let b = init_params(2, &small(), 4, 4).unwrap();
        let diff = a.online.get("pro0.w").unwrap().max_abs_diff(b.online.get("pro0.w").unwrap());
        assert!(diff > 0.0);
    }

    #[test]
    fn momentum_starts_as_copy() {
        let s = init_params(3, &small(), 4, 4).unwrap();
        for (n, k) in s.momentum.iter() {
            assert_eq!(s.online.get(n).unwrap(), k);
        }
        assert_eq!(s.momentum.len(), 2 + 2 * 4 + 2);
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        assert_eq!(ema_value(2.0, 4.0, 0.5), 3.0);
        assert_eq!(ema_value(2.0, 4.0, 1.0), 2.0);
        assert_eq!(ema_value(2.0, 4.0, 0.0), 4.0);
    }

    #[test]
    fn encode_shapes() {
        for (variant, p) in [(EncoderVariant::ConvSmall, 16), (EncoderVariant::ConvSmall, 4), (EncoderVariant::VitTiny, 4)] {
            let cfg = ModelConfig { variant, ..small() };
            let s = init_params(0, &cfg, p, 16).unwrap();
            let mut t = Tape::new();
            let b = s.bind(&mut t, false);
            let x = t.constant(Tensor::filled(&[32, 2, p, p], 0.3));
            let z = encode(&mut t, &cfg, &b.encoder, x, 16).unwrap();
            assert_eq!(t.shape(z), &[32, 8]);
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let s = init_params(0, &small(), 16, 16).unwrap();
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let x = t.constant(Tensor::zeros(&[16, 2, 16, 16]));
        let z = encode(&mut t, &s.config, &b.encoder, x, 16).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_patch_side_is_rejected() {
        let s = init_params(0, &small(), 4, 4).unwrap();
        let seq = PatchSequence {
            patches: Tensor::zeros(&[4, 2 * 8 * 8]),
            coords: vec![(0, 0), (0, 1), (1, 0), (1, 1)],
            patch: 8,
            height: 16,
            width: 16,
        };
        assert!(matches!(s.encode_sequence(&seq), Err(Error::InvalidArgument(_))));
    }
}
