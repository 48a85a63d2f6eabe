//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its value and enough saved state
//! to run its backward rule. `Graph::backward` walks the tape once in
//! reverse; gradients for parameter leaves are then pulled into the
//! [`ParamStore`] with [`ParamStore::accumulate_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

use super::params::{ParamId, ParamStore};
use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary elementwise op maps onto the first.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    /// `b` repeats every `n` elements of `a` (trailing-dims broadcast).
    Cyclic(usize),
    /// Explicit index into `b` for each element of `a`.
    Gather(Vec<usize>),
}

impl Broadcast {
    fn plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        if b.len() > a.len() {
            return Err(Error::dim(op, format!("cannot broadcast {b:?} into {a:?}")));
        }
        let pad = a.len() - b.len();
        let b_full: Vec<usize> = std::iter::repeat_n(1, pad).chain(b.iter().copied()).collect();
        for (&ad, &bd) in a.iter().zip(&b_full) {
            if bd != ad && bd != 1 {
                return Err(Error::dim(op, format!("cannot broadcast {b:?} into {a:?}")));
            }
        }
        // leading ones followed by an exact suffix is a cyclic repeat
        let first_full = b_full.iter().position(|&d| d != 1).unwrap_or(b_full.len());
        if b_full[first_full..] == a[first_full..] {
            let n: usize = a[first_full..].iter().product();
            return Ok(Broadcast::Cyclic(n.max(1)));
        }
        let total: usize = a.iter().product();
        let mut b_strides = vec![0usize; a.len()];
        let mut s = 1;
        for d in (0..a.len()).rev() {
            b_strides[d] = if b_full[d] == 1 { 0 } else { s };
            s *= b_full[d];
        }
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; a.len()];
        for _ in 0..total {
            idx.push(counter.iter().zip(&b_strides).map(|(c, s)| c * s).sum());
            for d in (0..a.len()).rev() {
                counter[d] += 1;
                if counter[d] < a[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        Ok(Broadcast::Gather(idx))
    }

    #[inline]
    fn map(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cyclic(n) => i % n,
            Broadcast::Gather(idx) => idx[i],
        }
    }
}

/// Bilinear taps for one output sample: (flat spatial index, weight).
type Taps = [(usize, f64); 4];

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Normalize { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Conv2d(Box<ConvSaved>),
    RoiAlign { fmap: Var, taps: Vec<Taps> },
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SmoothL1 { pred: Var, target: Vec<f64>, weight: Vec<f64>, beta: f64, norm: f64 },
    Focal { p: Var, target: Vec<f64>, alpha: f64, gamma: f64 },
}

#[derive(Debug)]
struct ConvSaved {
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
    cols: Vec<f64>,
    in_shape: [usize; 3],
    k: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// One forward computation and its gradient tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        assert!(t.is_finite(), "non-finite constant");
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf that is not a stored parameter (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].requires_grad = true;
        v
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: !p.frozen,
            param: Some(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[m, n] => Ok((m, n)),
            s => Err(Error::dim(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.rg(&[a]);
        self.push("transpose", t, Op::Transpose(a), rg)
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::plan("add", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv[plan.map(i)];
        }
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add(a, b, plan), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::plan("mul", self.shape(a), self.shape(b))?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o *= bv[plan.map(i)];
        }
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul(a, b, plan), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push("tanh", out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push("relu", out, Op::Relu(a), rg)
    }

    /// Row-wise softmax, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        debug_assert_eq!(out.len(), m * n);
        let rg = self.rg(&[a]);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2("layer_norm", a)?;
        if n < 2 {
            return Err(Error::dim("layer_norm", "need at least two columns"));
        }
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::new();
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(&[a]);
        self.push("layer_norm", out, Op::Normalize { x: a, inv_std }, rg)
    }

    // ---- reductions and shape ops ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let rg = self.rg(&[a]);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no inputs"));
        }
        let (_, n) = self.dims2("concat_rows", parts[0])?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims2("concat_rows", p)?;
            if pn != n {
                return Err(Error::dim("concat_rows", format!("column count {pn} != {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        let rg = self.rg(parts);
        self.push("concat_rows", Tensor::new(&[m, n], data)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let rg = self.rg(&[a]);
        self.push("slice_cols", Tensor::new(&[m, w], data)?, Op::SliceCols { x: a, start }, rg)
    }

    /// Selects (and possibly repeats) rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", a)?;
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(
            "gather_rows",
            Tensor::new(&[rows.len(), n], data)?,
            Op::GatherRows {
                x: a,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    // ---- vision primitives ----------------------------------------------

    /// 2-D convolution of a `[c_in, h, w]` map with `[c_out, c_in, k, k]` weights.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let in_shape: [usize; 3] = match self.shape(input) {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::dim("conv2d", format!("input must be [c, h, w], got {s:?}"))),
        };
        let (c_out, k) = match self.shape(weight) {
            &[co, ci, k1, k2] if ci == in_shape[0] && k1 == k2 => (co, k1),
            s => {
                return Err(Error::dim(
                    "conv2d",
                    format!("weight {s:?} incompatible with input {in_shape:?}"),
                ))
            }
        };
        if self.value(bias).len() != c_out {
            return Err(Error::dim("conv2d", "bias length != output channels"));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "zero stride"));
        }
        let [c_in, h, w] = in_shape;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("conv2d", "kernel larger than padded input"));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let cols = im2col(self.value(input).data(), in_shape, k, stride, pad, ho, wo);
        let rows = c_in * k * k;
        let mut out = vec![0.0; c_out * ho * wo];
        for (co, &b) in self.value(bias).data().iter().enumerate() {
            out[co * ho * wo..(co + 1) * ho * wo].fill(b);
        }
        matmul_acc(self.value(weight).data(), &cols, &mut out, c_out, rows, ho * wo);
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            "conv2d",
            Tensor::new(&[c_out, ho, wo], out)?,
            Op::Conv2d(Box::new(ConvSaved {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
                in_shape,
                k,
            })),
            rg,
        )
    }

    /// Bilinear RoI pooling of `[c, h, w]` features into `[n_boxes, c * p * p]`.
    ///
    /// Box coordinates are image pixels; feature cell `(i, j)` is centred on
    /// pixel `((j + 0.5) * stride, (i + 0.5) * stride)`. One sample is taken
    /// at the centre of each of the `p x p` bins and sample coordinates are
    /// clamped to the map.
    pub fn roi_align(&mut self, fmap: Var, boxes: &[BoundingBox], p: usize, stride: f64) -> Result<Var> {
        let [c, h, w] = match self.shape(fmap) {
            &[c, h, w] => [c, h, w],
            s => return Err(Error::dim("roi_align", format!("features must be [c, h, w], got {s:?}"))),
        };
        if boxes.is_empty() || p == 0 {
            return Err(Error::dim("roi_align", "need at least one box and p >= 1"));
        }
        let mut taps = Vec::with_capacity(boxes.len() * p * p);
        for b in boxes {
            if b.width() <= 0.0 || b.height() <= 0.0 {
                log::warn!("roi_align: degenerate box {b:?}, sampling a single point");
            }
            let bw = (b.x2 - b.x1).max(0.0) / p as f64;
            let bh = (b.y2 - b.y1).max(0.0) / p as f64;
            for i in 0..p {
                for j in 0..p {
                    let px = b.x1 + (j as f64 + 0.5) * bw;
                    let py = b.y1 + (i as f64 + 0.5) * bh;
                    taps.push(bilinear_taps(px / stride - 0.5, py / stride - 0.5, h, w));
                }
            }
        }
        let src = self.value(fmap).data();
        let hw = h * w;
        let pp = p * p;
        let mut out = vec![0.0; boxes.len() * c * pp];
        for (bi, box_taps) in taps.chunks(pp).enumerate() {
            let dst = &mut out[bi * c * pp..(bi + 1) * c * pp];
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                for (s, t) in box_taps.iter().enumerate() {
                    dst[ch * pp + s] = t.iter().map(|&(idx, wt)| wt * plane[idx]).sum();
                }
            }
        }
        let rg = self.rg(&[fmap]);
        self.push(
            "roi_align",
            Tensor::new(&[boxes.len(), c * pp], out)?,
            Op::RoiAlign { fmap, taps },
            rg,
        )
    }

    /// `[c, h, w] -> [1, c]` spatial mean.
    pub fn global_average_pool(&mut self, fmap: Var) -> Result<Var> {
        let (c, hw) = match self.shape(fmap) {
            &[c, h, w] => (c, h * w),
            s => return Err(Error::dim("global_average_pool", format!("expected [c, h, w], got {s:?}"))),
        };
        let src = self.value(fmap).data();
        let out: Vec<f64> = src.chunks(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(&[fmap]);
        self.push("global_average_pool", Tensor::new(&[1, c], out)?, Op::GlobalAvgPool(fmap), rg)
    }

    // ---- losses ---------------------------------------------------------

    /// Mean softmax cross-entropy of `[n, k]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("cross_entropy", logits)?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::dim("cross_entropy", "targets do not match logits"));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            softmax_in_place(row);
            loss -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `sum(weight * smooth_l1(pred - target)) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &Tensor, weight: &Tensor, beta: f64, norm: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() || target.shape() != weight.shape() {
            return Err(Error::dim("smooth_l1", "pred, target and weight shapes differ"));
        }
        let loss: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(weight.data())
            .map(|((p, t), w)| w * smooth_l1(p - t, beta))
            .sum::<f64>()
            / norm;
        let rg = self.rg(&[pred]);
        self.push(
            "smooth_l1",
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred,
                target: target.data().to_vec(),
                weight: weight.data().to_vec(),
                beta,
                norm,
            },
            rg,
        )
    }

    /// Mean focal loss of probabilities `p` against 0/1 targets.
    pub fn focal_loss(&mut self, p: Var, target: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
        if self.shape(p) != target.shape() {
            return Err(Error::dim("focal_loss", "probabilities and targets differ in shape"));
        }
        let n = target.len() as f64;
        let loss: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| focal_term(pv, t, alpha, gamma).0)
            .sum::<f64>()
            / n;
        let rg = self.rg(&[p]);
        self.push(
            "focal_loss",
            Tensor::scalar(loss),
            Op::Focal {
                p,
                target: target.data().to_vec(),
                alpha,
                gamma,
            },
            rg,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar root; gradients are readable via [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", "root must be a scalar"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accum_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(self.grads[v.0].as_mut().unwrap().data_mut());
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        let gd = g.data();
        // Temporarily take the op so saved state can be borrowed alongside `self`.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.value(*b).shape()[1];
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_nt_acc(gd, self.value(*b).data(), &mut ga, m, n, k);
                    self.accum(*a, Tensor::new(&[m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_tn_acc(self.value(*a).data(), gd, &mut gb, m, k, n);
                    self.accum(*b, Tensor::new(&[k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let t = g.transpose2()?;
                self.accum(*a, t);
            }
            Op::Add(a, b, plan) => {
                self.accum(*a, g.clone());
                self.accum_with(*b, |gb| {
                    for (i, &v) in gd.iter().enumerate() {
                        gb[plan.map(i)] += v;
                    }
                });
            }
            Op::Mul(a, b, plan) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga: Vec<f64> = gd.iter().enumerate().map(|(i, &v)| v * bv[plan.map(i)]).collect();
                    let shape = g.shape().to_vec();
                    self.accum(*a, Tensor::new(&shape, ga)?);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    self.accum_with(*b, |gb| {
                        for (i, &v) in gd.iter().enumerate() {
                            gb[plan.map(i)] += v * av[i];
                        }
                    });
                }
            }
            Op::Scale(a, s) => self.accum(*a, g.map(|v| v * s)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let ga = elementwise(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.accum(*a, ga);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let ga = elementwise(g, y, |gv, yv| gv * (1.0 - yv * yv));
                self.accum(*a, ga);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = elementwise(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accum(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let n = y.shape()[1];
                let mut ga = vec![0.0; y.len()];
                for ((grow, yrow), out) in gd.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = dot(grow, yrow);
                    for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = yv * (gv - s);
                    }
                }
                let shape = y.shape().to_vec();
                self.accum(*a, Tensor::new(&shape, ga)?);
            }
            Op::Normalize { x, inv_std } => {
                let y = &self.nodes[idx].value;
                let n = y.shape()[1];
                let nf = n as f64;
                let mut ga = vec![0.0; y.len()];
                for (r, ((grow, yrow), out)) in gd.chunks(n).zip(y.data().chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                    let sg: f64 = grow.iter().sum();
                    let sgy = dot(grow, yrow);
                    let inv = inv_std[r];
                    for ((o, &gv), &yv) in out.iter_mut().zip(grow).zip(yrow) {
                        *o = inv / nf * (nf * gv - sg - yv * sgy);
                    }
                }
                let shape = y.shape().to_vec();
                self.accum(*x, Tensor::new(&shape, ga)?);
            }
            Op::Sum(a) => {
                let s = gd[0];
                let shape = self.shape(*a).to_vec();
                self.accum(*a, Tensor::full(&shape, s));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n: usize = shape.iter().product();
                self.accum(*a, Tensor::full(&shape, gd[0] / n as f64));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accum(*a, g.reshaped(&shape)?);
            }
            Op::ConcatRows(parts) => {
                let n = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let m = self.shape(p)[0];
                    let slice = gd[offset * n..(offset + m) * n].to_vec();
                    offset += m;
                    self.accum(p, Tensor::new(&[m, n], slice)?);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = g.dims2()?;
                let n = self.shape(*x)[1];
                let start = *start;
                self.accum_with(*x, |gx| {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] += gd[i * w + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let n = g.shape()[1];
                self.accum_with(*x, |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += gd[k * n + j];
                        }
                    }
                });
            }
            Op::Conv2d(s) => {
                let [c_in, _, _] = s.in_shape;
                let c_out = self.shape(s.weight)[0];
                let rows = c_in * s.k * s.k;
                let hw_out = gd.len() / c_out;
                if self.requires_grad(s.bias) {
                    let gb: Vec<f64> = gd.chunks(hw_out).map(|ch| ch.iter().sum()).collect();
                    self.accum(s.bias, Tensor::new(&[c_out], gb)?);
                }
                if self.requires_grad(s.weight) {
                    let mut gw = vec![0.0; c_out * rows];
                    matmul_nt_acc(gd, &s.cols, &mut gw, c_out, hw_out, rows);
                    let shape = self.shape(s.weight).to_vec();
                    self.accum(s.weight, Tensor::new(&shape, gw)?);
                }
                if self.requires_grad(s.input) {
                    let mut gcols = vec![0.0; rows * hw_out];
                    matmul_tn_acc(self.value(s.weight).data(), gd, &mut gcols, c_out, rows, hw_out);
                    let out_shape = self.nodes[idx].value.shape();
                    let (ho, wo) = (out_shape[1], out_shape[2]);
                    let gin = col2im(&gcols, s.in_shape, s.k, s.stride, s.pad, ho, wo);
                    self.accum(s.input, Tensor::new(&s.in_shape, gin)?);
                }
            }
            Op::RoiAlign { fmap, taps } => {
                let (c, hw) = {
                    let sh = self.shape(*fmap);
                    (sh[0], sh[1] * sh[2])
                };
                let per_box = g.shape()[1];
                let pp = per_box / c;
                self.accum_with(*fmap, |gf| {
                    for (bi, box_taps) in taps.chunks(pp).enumerate() {
                        let src = &gd[bi * per_box..(bi + 1) * per_box];
                        for ch in 0..c {
                            let plane = &mut gf[ch * hw..(ch + 1) * hw];
                            for (s, t) in box_taps.iter().enumerate() {
                                let gv = src[ch * pp + s];
                                for &(i, w) in t {
                                    plane[i] += w * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(fmap) => {
                let shape = self.shape(*fmap).to_vec();
                let hw = shape[1] * shape[2];
                let mut gf = Vec::with_capacity(hw * shape[0]);
                for &gv in gd {
                    gf.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                self.accum(*fmap, Tensor::new(&shape, gf)?);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let shape = self.shape(*logits).to_vec();
                let (m, n) = (shape[0], shape[1]);
                let scale = gd[0] / m as f64;
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * n + t] -= 1.0;
                }
                for v in gl.iter_mut() {
                    *v *= scale;
                }
                self.accum(*logits, Tensor::new(&shape, gl)?);
            }
            Op::SmoothL1 {
                pred,
                target,
                weight,
                beta,
                norm,
            } => {
                let shape = self.shape(*pred).to_vec();
                let pv = self.value(*pred).data();
                let gp: Vec<f64> = pv
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((p, t), w)| gd[0] * w * smooth_l1_grad(p - t, *beta) / norm)
                    .collect();
                self.accum(*pred, Tensor::new(&shape, gp)?);
            }
            Op::Focal { p, target, alpha, gamma } => {
                let shape = self.shape(*p).to_vec();
                let n = target.len() as f64;
                let pv = self.value(*p).data();
                let gp: Vec<f64> = pv
                    .iter()
                    .zip(target)
                    .map(|(&pv, &t)| gd[0] * focal_term(pv, t, *alpha, *gamma).1 / n)
                    .collect();
                self.accum(*p, Tensor::new(&shape, gp)?);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.shape(), data).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

/// Focal loss term and its derivative with respect to the raw probability.
pub(crate) fn focal_term(p: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let inside = clamped == p;
    let positive = target > 0.5;
    let (q, a, dq_dp) = if positive {
        (clamped, alpha, 1.0)
    } else {
        (1.0 - clamped, 1.0 - alpha, -1.0)
    };
    let one_minus = 1.0 - q;
    let value = -a * one_minus.powf(gamma) * q.ln();
    let dv_dq = if gamma == 0.0 {
        -a / q
    } else {
        -a * (-gamma * one_minus.powf(gamma - 1.0) * q.ln() + one_minus.powf(gamma) / q)
    };
    (value, if inside { dv_dq * dq_dp } else { 0.0 })
}

fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> Taps {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let lx = x - x0 as f64;
    let ly = y - y0 as f64;
    [
        (y0 * w + x0, (1.0 - ly) * (1.0 - lx)),
        (y0 * w + x1, (1.0 - ly) * lx),
        (y1 * w + x0, ly * (1.0 - lx)),
        (y1 * w + x1, ly * lx),
    ]
}

fn im2col(src: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[(ch * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], [c, h, w]: [usize; 3], k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[(ch * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}
