//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every evaluation. Leaves are either
//! parameters (gradients requested) or constants; every primitive appends one
//! node whose inputs precede it, so reverse index order is a valid
//! topological order and `backward` visits each node once.

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;

use super::fft::{fft2, ifft2_complex, ComplexField, RadialBands};
use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Fixed sparse linear map `y = S·x` stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap {
    pub in_len: usize,
    pub out_shape: Vec<usize>,
    /// `row_ptr[i]..row_ptr[i+1]` indexes the entries of output `i`.
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseMap {
    pub fn builder(in_len: usize) -> SparseMapBuilder {
        SparseMapBuilder {
            in_len,
            row_ptr: vec![0],
            cols: Vec::new(),
            weights: Vec::new(),
        }
    }

    pub fn out_len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_len())
            .map(|i| {
                (self.row_ptr[i]..self.row_ptr[i + 1])
                    .map(|e| self.weights[e] * x[self.cols[e]])
                    .sum()
            })
            .collect()
    }

    fn apply_transpose_add(&self, gy: &[f64], gx: &mut [f64]) {
        for (i, g) in gy.iter().enumerate() {
            for e in self.row_ptr[i]..self.row_ptr[i + 1] {
                gx[self.cols[e]] += self.weights[e] * g;
            }
        }
    }

    /// Composition `other ∘ self` (apply `self` first).
    pub fn then(&self, other: &SparseMap) -> SparseMap {
        assert_eq!(other.in_len, self.out_len());
        let mut b = SparseMap::builder(self.in_len);
        let mut acc: Vec<f64> = vec![0.0; self.in_len];
        let mut touched: Vec<usize> = Vec::new();
        for i in 0..other.out_len() {
            for e in other.row_ptr[i]..other.row_ptr[i + 1] {
                let (mid, w) = (other.cols[e], other.weights[e]);
                for f in self.row_ptr[mid]..self.row_ptr[mid + 1] {
                    let c = self.cols[f];
                    if acc[c] == 0.0 {
                        touched.push(c);
                    }
                    acc[c] += w * self.weights[f];
                }
            }
            touched.sort_unstable();
            touched.dedup();
            for &c in &touched {
                if acc[c] != 0.0 {
                    b.push(c, acc[c]);
                }
                acc[c] = 0.0;
            }
            touched.clear();
            b.end_row();
        }
        b.finish(&other.out_shape)
    }
}

pub struct SparseMapBuilder {
    in_len: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMapBuilder {
    pub fn push(&mut self, col: usize, weight: f64) {
        debug_assert!(col < self.in_len);
        self.cols.push(col);
        self.weights.push(weight);
    }

    pub fn end_row(&mut self) {
        self.row_ptr.push(self.cols.len());
    }

    pub fn finish(self, out_shape: &[usize]) -> SparseMap {
        assert_eq!(
            out_shape.iter().product::<usize>(),
            self.row_ptr.len() - 1,
            "sparse map rows do not match output shape"
        );
        SparseMap {
            in_len: self.in_len,
            out_shape: out_shape.to_vec(),
            row_ptr: self.row_ptr,
            cols: self.cols,
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[m,n] + [n]` broadcast over rows.
    AddRow(Var, Var),
    /// `[m,n] ⊙ [n]` broadcast over rows.
    MulRow(Var, Var),
    Scale(Var, f64),
    /// `a + s` with `s` a scalar node.
    AddScalar(Var, Var),
    /// `s · a` with `s` a scalar node.
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Diag(Var),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sparse(Var, Arc<SparseMap>),
    PoolRows { z: Var, weights: Arc<Vec<f64>>, group: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Select { a: Var, fill: Var, mask: Arc<Vec<bool>> },
    Median { x: Var, picks: Vec<usize> },
    LocalVar3 { x: Var, means: Vec<f64>, counts: Vec<f64> },
    Spectral { x: Var, gains: Var, bands: Arc<RadialBands>, centered: ComplexField },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "gradient lookup on a foreign tape");
        match &self.grads[v.index()] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.index()]),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }
}

const CONV_CHUNK: usize = 32;
const NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::InvalidState("variable is not on this tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id);
        &self.nodes[v.index()]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.node(v).needs_grad)
    }

    /// Leaf whose gradient is requested.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn mat_dims(&self, v: Var) -> Result<(usize, usize)> {
        self.check(v)?;
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::invalid(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a)?;
        let (k2, n) = self.mat_dims(b)?;
        if k != k2 {
            return Err(Error::invalid(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a)?;
        let (n, k2) = self.mat_dims(b)?;
        if k != k2 {
            return Err(Error::invalid(format!("matmul_nt inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, mul: bool) -> Result<Var> {
        self.check(a)?;
        self.check(r)?;
        let n = *self.shape(a).last().unwrap();
        if self.value(r).len() != n {
            return Err(Error::invalid(format!(
                "row broadcast: row length {} vs last extent {n}",
                self.value(r).len()
            )));
        }
        let rv = self.value(r).data().to_vec();
        let va = self.value(a);
        let data: Vec<f64> = va
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(&rv).map(|(&x, &y)| if mul { x * y } else { x + y }).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, r]);
        let op = if mul { Op::MulRow(a, r) } else { Op::AddRow(a, r) };
        Ok(self.push(t, op, ng))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(a, bias, false)
    }

    pub fn mul_row(&mut self, a: Var, scale: Var) -> Result<Var> {
        self.row_broadcast(a, scale, true)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| c * x);
        let ng = self.ng(&[a]);
        self.push(t, Op::Scale(a, c), ng)
    }

    fn scalar_of(&self, s: Var) -> Result<f64> {
        self.check(s)?;
        let v = self.value(s);
        if v.len() != 1 {
            return Err(Error::invalid(format!("expected a scalar node, got shape {:?}", v.shape())));
        }
        Ok(v.item())
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        let sv = self.scalar_of(s)?;
        let t = self.value(a).map(|x| x + sv);
        let ng = self.ng(&[a, s]);
        Ok(self.push(t, Op::AddScalar(a, s), ng))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        let sv = self.scalar_of(s)?;
        let t = self.value(a).map(|x| x * sv);
        let ng = self.ng(&[a, s]);
        Ok(self.push(t, Op::ScaleBy(a, s), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, logistic, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a).reshaped(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Scales every row to unit Euclidean norm. Fails on a zero row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x)?;
        let v = self.value(x).data();
        let mut norms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in v.chunks(n) {
            let nr = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nr == 0.0 || !nr.is_finite() {
                return Err(Error::invalid("cannot normalize a zero or non-finite row"));
            }
            norms.push(nr);
            out.extend(row.iter().map(|a| a / nr));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::L2NormalizeRows { x, norms }, ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x)?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|a| a - lse));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LogSoftmaxRows(x), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x)?;
        let mut out = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks(n) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|a| (a - lse).exp()));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(x), ng))
    }

    /// Standardizes every row to mean 0 and variance 1 (epsilon 1e-5).
    pub fn layer_norm_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x)?;
        let mut out = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in self.value(x).data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|a| (a - mu) * is));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::LayerNormRows { x, inv_std }, ng))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat_dims(x)?;
        if m != n {
            return Err(Error::invalid(format!("diag of a non-square {m}×{n} matrix")));
        }
        let v = self.value(x);
        let d = (0..n).map(|i| v.data()[i * n + i]).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::vector(d), Op::Diag(x), ng))
    }

    /// Stacks along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape()[1..] != tail[..] {
                return Err(Error::invalid(format!(
                    "concat: trailing shape {:?} vs {:?}",
                    &v.shape()[1..],
                    tail
                )));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), ng))
    }

    /// Rows `start..start+count` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x);
        if count == 0 || start + count > v.rows() {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of {} rows",
                start + count,
                v.rows()
            )));
        }
        let w = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = count;
        let data = v.data()[start * w..(start + count) * w].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { x, start }, ng))
    }

    pub fn sparse(&mut self, x: Var, map: Arc<SparseMap>) -> Result<Var> {
        self.check(x)?;
        if self.value(x).len() != map.in_len {
            return Err(Error::invalid(format!(
                "sparse map expects {} inputs, got {}",
                map.in_len,
                self.value(x).len()
            )));
        }
        let out = map.apply(self.value(x).data());
        let t = Tensor::from_parts(map.out_shape.clone(), out);
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Sparse(x, map), ng))
    }

    /// Weighted sum of consecutive row groups: `[G·L, d] → [G, d]` with
    /// `out[g] = Σ_l weights[g·L + l] · z[g·L + l]`. Weights are constants.
    pub fn pool_rows(&mut self, z: Var, weights: Arc<Vec<f64>>, group: usize) -> Result<Var> {
        let (rows, d) = self.mat_dims(z)?;
        if group == 0 || rows % group != 0 || weights.len() != rows {
            return Err(Error::invalid(format!(
                "pool_rows: {rows} rows, group {group}, {} weights",
                weights.len()
            )));
        }
        let g = rows / group;
        let zv = self.value(z).data();
        let mut out = vec![0.0; g * d];
        for r in 0..rows {
            let w = weights[r];
            if w == 0.0 {
                continue;
            }
            let o = &mut out[(r / group) * d..(r / group + 1) * d];
            for (a, b) in o.iter_mut().zip(&zv[r * d..(r + 1) * d]) {
                *a += w * b;
            }
        }
        let ng = self.ng(&[z]);
        Ok(self.push(Tensor::from_parts(vec![g, d], out), Op::PoolRows { z, weights, group }, ng))
    }

    /// Same-padded stride-1 convolution of `x: [N,C,H,W]` with `w: [O,C,k,k]`
    /// (odd `k`) plus bias `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (n, c, h, wd) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::invalid(format!("conv2d input must be NCHW, got {s:?}"))),
        };
        let (o, k) = match self.shape(w) {
            [o, ci, k1, k2] if *ci == c && k1 == k2 && k1 % 2 == 1 => (*o, *k1),
            s => {
                return Err(Error::invalid(format!(
                    "conv2d kernel {s:?} incompatible with {c} input channels"
                )))
            }
        };
        if self.value(b).len() != o {
            return Err(Error::invalid("conv2d bias length must equal output channels"));
        }
        let geom = ConvGeom { n, c, h, w: wd, o, k };
        let out = conv_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), geom);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::from_parts(vec![n, o, h, wd], out), Op::Conv2d { x, w, b, geom }, ng))
    }

    /// 2×2 average pooling with stride 2 on `[N,C,H,W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c, h, w) = match self.shape(x) {
            [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => (*n, *c, *h, *w),
            s => return Err(Error::invalid(format!("avg_pool2 needs NCHW with even H, W; got {s:?}"))),
        };
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let a = 2 * i * w + 2 * j;
                    dst[i * wo + j] = 0.25 * (src[a] + src[a + 1] + src[a + w] + src[a + w + 1]);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c, ho, wo], out), Op::AvgPool2(x), ng))
    }

    /// `[N,C,H,W] → [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let (n, c, hw) = match self.shape(x) {
            [n, c, h, w] => (*n, *c, h * w),
            s => return Err(Error::invalid(format!("global_avg_pool needs NCHW, got {s:?}"))),
        };
        let out = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, c], out), Op::GlobalAvgPool(x), ng))
    }

    /// `out = mask ? a : fill` elementwise, with `fill` a scalar node.
    pub fn select(&mut self, a: Var, fill: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.check(a)?;
        let fv = self.scalar_of(fill)?;
        if mask.len() != self.value(a).len() {
            return Err(Error::invalid("select mask length mismatch"));
        }
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { x } else { fv })
            .collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let ng = self.ng(&[a, fill]);
        Ok(self.push(t, Op::Select { a, fill, mask }, ng))
    }

    /// Median of all elements (mean of the two central values for even
    /// counts); the gradient flows to the selected element(s).
    pub fn median(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let v = self.value(x).data();
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&i, &j| v[i].total_cmp(&v[j]).then(i.cmp(&j)));
        let n = v.len();
        let picks = if n % 2 == 1 {
            vec![order[n / 2]]
        } else {
            vec![order[n / 2 - 1], order[n / 2]]
        };
        let m = picks.iter().map(|&i| v[i]).sum::<f64>() / picks.len() as f64;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Median { x, picks }, ng))
    }

    /// Variance over each pixel's 3×3 neighbourhood (clipped at the borders)
    /// of an `H×W` field.
    pub fn local_var3(&mut self, x: Var) -> Result<Var> {
        let (h, w) = self.mat_dims(x)?;
        let v = self.value(x).data();
        let mut means = vec![0.0; h * w];
        let mut counts = vec![0.0; h * w];
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
                let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
                let mut s = 0.0;
                let mut cnt = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        s += v[rr * w + cc];
                        cnt += 1.0;
                    }
                }
                let mu = s / cnt;
                let mut var = 0.0;
                for rr in r0..=r1 {
                    for cc in c0..=c1 {
                        let d = v[rr * w + cc] - mu;
                        var += d * d;
                    }
                }
                means[r * w + c] = mu;
                counts[r * w + c] = cnt;
                out[r * w + c] = var / cnt;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![h, w], out), Op::LocalVar3 { x, means, counts }, ng))
    }

    /// Radial-band spectral filter of an `H×W` field:
    /// `mean(x) + Re ifft2(M ⊙ fft2(x − mean(x)))` where `M` takes `gains[b]`
    /// on band `b`.
    pub fn spectral_filter(&mut self, x: Var, gains: Var, bands: Arc<RadialBands>) -> Result<Var> {
        let (h, w) = self.mat_dims(x)?;
        self.check(gains)?;
        if bands.height != h || bands.width != w || self.value(gains).len() != bands.bands {
            return Err(Error::invalid("spectral filter band layout does not match input"));
        }
        let xv = self.value(x);
        let mu = xv.mean();
        let centered_field = xv.map(|v| v - mu);
        let centered = fft2(&centered_field)?;
        let g = self.value(gains).data();
        let mut masked = centered.clone();
        for (i, &b) in bands.index.iter().enumerate() {
            masked.re[i] *= g[b];
            masked.im[i] *= g[b];
        }
        let inv = ifft2_complex(&masked);
        let out: Vec<f64> = inv.re.iter().map(|v| v + mu).collect();
        let ng = self.ng(&[x, gains]);
        Ok(self.push(
            Tensor::from_parts(vec![h, w], out),
            Op::Spectral {
                x,
                gains,
                bands,
                centered,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidState(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.index() + 1;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.nodes[loss.index()].needs_grad {
            grads[loss.index()] = Some(Tensor::scalar(1.0));
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let nd = &self.nodes[v.index()];
        if !nd.needs_grad {
            return;
        }
        let slot = &mut grads[v.index()];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(nd.value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, node: &Node, gy_t: &Tensor, grads: &mut [Option<Tensor>]) {
        let gy = gy_t.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| gemm(m, n, k, gy, false, bv, true, ga, true));
                self.acc(grads, *b, |gb| gemm(k, m, n, av, true, gy, false, gb, true));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |ga| gemm(m, n, k, gy, false, bv, false, ga, true));
                self.acc(grads, *b, |gb| gemm(n, m, k, gy, true, av, false, gb, true));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, r) => {
                let n = self.value(*r).len();
                self.acc(grads, *a, |g| add_into(g, gy));
                self.acc(grads, *r, |g| {
                    for row in gy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let n = self.value(*r).len();
                let av = self.value(*a).data();
                let rv = self.value(*r).data();
                self.acc(grads, *a, |g| {
                    for (i, x) in g.iter_mut().enumerate() {
                        *x += gy[i] * rv[i % n];
                    }
                });
                self.acc(grads, *r, |g| {
                    for (i, d) in gy.iter().enumerate() {
                        g[i % n] += d * av[i];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += c * d)),
            Op::AddScalar(a, s) => {
                self.acc(grads, *a, |g| add_into(g, gy));
                let total: f64 = gy.iter().sum();
                self.acc(grads, *s, |g| g[0] += total);
            }
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item();
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(x, d)| *x += sv * d));
                let dot: f64 = gy.iter().zip(av).map(|(d, x)| d * x).sum();
                self.acc(grads, *s, |g| g[0] += dot);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Exp(a) => self.acc(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += gy[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] / av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * sign(av[i]);
                    }
                });
            }
            Op::Square(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * av[i] * gy[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |g| g.iter_mut().for_each(|x| *x += gy[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |g| g.iter_mut().for_each(|x| *x += gy[0] / n));
            }
            Op::Reshape(a) => self.acc(grads, *a, |g| add_into(g, gy)),
            Op::L2NormalizeRows { x, norms } => {
                let n = y.len() / norms.len();
                self.acc(grads, *x, |g| {
                    for (r, nr) in norms.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gy[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            g[r * n + j] += (gr[j] - yr[j] * dot) / nr;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let n = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, |g| {
                    for r in 0..y.len() / n {
                        let gs: f64 = gy[r * n..(r + 1) * n].iter().sum();
                        for j in 0..n {
                            let i = r * n + j;
                            g[i] += gy[i] - y[i].exp() * gs;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = *self.shape(*x).last().unwrap();
                self.acc(grads, *x, |g| {
                    for r in 0..y.len() / n {
                        let dot: f64 = (r * n..(r + 1) * n).map(|i| gy[i] * y[i]).sum();
                        for i in r * n..(r + 1) * n {
                            g[i] += y[i] * (gy[i] - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = y.len() / inv_std.len();
                self.acc(grads, *x, |g| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gy[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            g[r * n + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Diag(x) => {
                let n = gy.len();
                self.acc(grads, *x, |g| {
                    for i in 0..n {
                        g[i * n + i] += gy[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |g| add_into(g, &gy[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let w = self.value(*x).row_len();
                self.acc(grads, *x, |g| add_into(&mut g[start * w..start * w + gy.len()], gy));
            }
            Op::Sparse(x, map) => self.acc(grads, *x, |g| map.apply_transpose_add(gy, g)),
            Op::PoolRows { z, weights, group } => {
                let d = *self.shape(*z).last().unwrap();
                self.acc(grads, *z, |g| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let src = &gy[(r / group) * d..(r / group + 1) * d];
                        for (a, b) in g[r * d..(r + 1) * d].iter_mut().zip(src) {
                            *a += w * b;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.nodes[x.index()].needs_grad;
                let (gx, gw, gb) = conv_backward(xv, wv, gy, *geom, want_x);
                if let Some(gx) = gx {
                    self.acc(grads, *x, |g| add_into(g, &gx));
                }
                self.acc(grads, *w, |g| add_into(g, &gw));
                self.acc(grads, *b, |g| add_into(g, &gb));
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let planes = s[0] * s[1];
                self.acc(grads, *x, |g| {
                    for p in 0..planes {
                        for i in 0..ho {
                            for j in 0..wo {
                                let d = 0.25 * gy[p * ho * wo + i * wo + j];
                                let a = p * h * w + 2 * i * w + 2 * j;
                                g[a] += d;
                                g[a + 1] += d;
                                g[a + w] += d;
                                g[a + w + 1] += d;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                self.acc(grads, *x, |g| {
                    for (p, d) in gy.iter().enumerate() {
                        let v = d / hw as f64;
                        g[p * hw..(p + 1) * hw].iter_mut().for_each(|x| *x += v);
                    }
                });
            }
            Op::Select { a, fill, mask } => {
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        if mask[i] {
                            g[i] += gy[i];
                        }
                    }
                });
                let rest: f64 = gy.iter().zip(mask.iter()).filter(|(_, &m)| !m).map(|(d, _)| d).sum();
                self.acc(grads, *fill, |g| g[0] += rest);
            }
            Op::Median { x, picks } => {
                let share = gy[0] / picks.len() as f64;
                self.acc(grads, *x, |g| picks.iter().for_each(|&i| g[i] += share));
            }
            Op::LocalVar3 { x, means, counts } => {
                let (h, w) = dims2(self.shape(*x));
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for r in 0..h {
                        for c in 0..w {
                            let p = r * w + c;
                            let k = 2.0 * gy[p] / counts[p];
                            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                                    let q = rr * w + cc;
                                    g[q] += k * (xv[q] - means[p]);
                                }
                            }
                        }
                    }
                });
            }
            Op::Spectral {
                x,
                gains,
                bands,
                centered,
            } => {
                let (h, w) = (bands.height, bands.width);
                let gvals = self.value(*gains).data();
                let gfield = Tensor::from_parts(vec![h, w], gy.to_vec());
                let ghat = fft2(&gfield).expect("shape checked at record time");
                // d/dgains via Parseval: <gy, Re ifft(1_b C)> = Re Σ_{k∈b} conj(Ĝ_k) C_k / HW
                let inv_n = 1.0 / (h * w) as f64;
                self.acc(grads, *gains, |g| {
                    for (i, &b) in bands.index.iter().enumerate() {
                        let gk = Complex::new(ghat.re[i], ghat.im[i]);
                        let ck = Complex::new(centered.re[i], centered.im[i]);
                        g[b] += (gk.conj() * ck).re * inv_n;
                    }
                });
                // d/dx: the mask is real and symmetric, so the filter is
                // self-adjoint; the mean path adds (1 - g_dc)·mean(gy).
                if self.nodes[x.index()].needs_grad {
                    let mut masked = ghat;
                    for (i, &b) in bands.index.iter().enumerate() {
                        masked.re[i] *= gvals[b];
                        masked.im[i] *= gvals[b];
                    }
                    let back = ifft2_complex(&masked);
                    let dc_gain = gvals[bands.index[0]];
                    let mg = gy.iter().sum::<f64>() * inv_n * (1.0 - dc_gain);
                    self.acc(grads, *x, |g| {
                        for i in 0..g.len() {
                            g[i] += back.re[i] + mg;
                        }
                    });
                }
            }
        }
    }
}

fn dims2(s: &[usize]) -> (usize, usize) {
    (s[0], s[1])
}

fn add_into(g: &mut [f64], d: &[f64]) {
    g.iter_mut().zip(d).for_each(|(a, b)| *a += b);
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (c, h, w, k) = (g.c, g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for yy in 0..h {
                    let sy = yy as isize + dy;
                    let dst = &mut row[yy * w..(yy + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in dst.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *d = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (c, h, w, k) = (g.c, g.h, g.w, g.k);
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for yy in 0..h {
                    let sy = yy as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + dxo;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[ci * hw + sy as usize * w + sx as usize] += row[yy * w + xx];
                    }
                }
            }
        }
    }
}

fn conv_forward(x: &[f64], wt: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let hw = g.h * g.w;
    let in_len = g.c * hw;
    let out_len = g.o * hw;
    let kk = g.c * g.k * g.k;
    let mut out = vec![0.0; g.n * out_len];
    out.par_chunks_mut(CONV_CHUNK * out_len)
        .zip(x.par_chunks(CONV_CHUNK * in_len))
        .for_each(|(oc, xc)| {
            let mut cols = vec![0.0; kk * hw];
            for (o, xi) in oc.chunks_mut(out_len).zip(xc.chunks(in_len)) {
                im2col(xi, g, &mut cols);
                for (oi, bias) in b.iter().enumerate() {
                    o[oi * hw..(oi + 1) * hw].fill(*bias);
                }
                gemm(g.o, kk, hw, wt, false, &cols, false, o, true);
            }
        });
    out
}

type ConvGrads = (Option<Vec<f64>>, Vec<f64>, Vec<f64>);

fn conv_backward(x: &[f64], wt: &[f64], gy: &[f64], g: ConvGeom, want_x: bool) -> ConvGrads {
    let hw = g.h * g.w;
    let in_len = g.c * hw;
    let out_len = g.o * hw;
    let kk = g.c * g.k * g.k;
    let mut gx = if want_x { vec![0.0; g.n * in_len] } else { Vec::new() };
    let n_chunks = g.n.div_ceil(CONV_CHUNK);
    let chunk_work = |ci: usize, gx_chunk: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
        let lo = ci * CONV_CHUNK;
        let hi = (lo + CONV_CHUNK).min(g.n);
        let mut gw = vec![0.0; g.o * kk];
        let mut gb = vec![0.0; g.o];
        let mut cols = vec![0.0; kk * hw];
        let mut dcols = vec![0.0; kk * hw];
        let mut gx_chunk = gx_chunk;
        for img in lo..hi {
            let xi = &x[img * in_len..(img + 1) * in_len];
            let gi = &gy[img * out_len..(img + 1) * out_len];
            im2col(xi, g, &mut cols);
            gemm(g.o, hw, kk, gi, false, &cols, true, &mut gw, true);
            for (oi, acc) in gb.iter_mut().enumerate() {
                *acc += gi[oi * hw..(oi + 1) * hw].iter().sum::<f64>();
            }
            if let Some(gxc) = gx_chunk.as_deref_mut() {
                gemm(kk, g.o, hw, wt, true, gi, false, &mut dcols, false);
                let local = img - lo;
                col2im_add(&dcols, g, &mut gxc[local * in_len..(local + 1) * in_len]);
            }
        }
        (gw, gb)
    };
    let partials: Vec<(Vec<f64>, Vec<f64>)> = if want_x {
        gx.par_chunks_mut(CONV_CHUNK * in_len)
            .enumerate()
            .map(|(ci, gxc)| chunk_work(ci, Some(gxc)))
            .collect()
    } else {
        (0..n_chunks).into_par_iter().map(|ci| chunk_work(ci, None)).collect()
    };
    let mut gw = vec![0.0; g.o * kk];
    let mut gb = vec![0.0; g.o];
    for (pw, pb) in partials {
        add_into(&mut gw, &pw);
        add_into(&mut gb, &pb);
    }
    (if want_x { Some(gx) } else { None }, gw, gb)
}
