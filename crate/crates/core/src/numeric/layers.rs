//! Parameterised building blocks over the tape.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// `x · w + b` with `w: [d_in, d_out]`, `b: [d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.insert_glorot(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng)?;
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        linear(g, store, x, self.w, self.b)
    }
}

/// Affine map with explicit parameters; bias broadcast over rows.
pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Row layer normalisation with learned scale and shift.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let scale = store.insert(format!("{name}.scale"), Tensor::ones(&[dim]))?;
        let shift = store.insert(format!("{name}.shift"), Tensor::zeros(&[dim]))?;
        Ok(Self { scale, shift })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let n = g.normalize_rows(x)?;
        let s = g.param(store, self.scale);
        let b = g.param(store, self.shift);
        let y = g.mul(n, s)?;
        g.add(y, b)
    }
}

/// Initial forget-gate bias. At zero the earliest steps of a short chain are
/// damped by roughly 2^-n and training latches onto the last input.
pub const FORGET_BIAS: f64 = 2.0;

/// Single-layer LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct Lstm {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let limit = 1.0 / (hidden as f64).sqrt();
        let w_x = store.insert_uniform(format!("{name}.w_x"), &[d_in, 4 * hidden], limit, rng)?;
        let w_h = store.insert_uniform(format!("{name}.w_h"), &[hidden, 4 * hidden], limit, rng)?;
        let bias: Vec<f64> = (0..4 * hidden).map(|k| if (hidden..2 * hidden).contains(&k) { FORGET_BIAS } else { 0.0 }).collect();
        let b = store.insert(format!("{name}.bias"), Tensor::new(&[4 * hidden], bias)?)?;
        Ok(Self {
            w_x,
            w_h,
            b,
            d_in,
            hidden,
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState {
            h: g.constant(Tensor::zeros(&[1, self.hidden])),
            c: g.constant(Tensor::zeros(&[1, self.hidden])),
        }
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, x: Var, state: &LstmState) -> Result<LstmState> {
        if g.shape(x) != [1, self.d_in] {
            return Err(Error::dim("lstm_step", format!("input {:?}, expected [1, {}]", g.shape(x), self.d_in)));
        }
        let hs = self.hidden;
        let w_x = g.param(store, self.w_x);
        let w_h = g.param(store, self.w_h);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w_x)?;
        let hw = g.matmul(state.h, w_h)?;
        let pre = g.add(xw, hw)?;
        let pre = g.add(pre, b)?;
        let i = g.slice_cols(pre, 0, hs)?;
        let f = g.slice_cols(pre, hs, 2 * hs)?;
        let cand = g.slice_cols(pre, 2 * hs, 3 * hs)?;
        let o = g.slice_cols(pre, 3 * hs, 4 * hs)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let fc = g.mul(f, state.c)?;
        let ic = g.mul(i, cand)?;
        let c = g.add(fc, ic)?;
        let tc = g.tanh(c)?;
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Runs the cell over `[1, d_in]` inputs from zero state; returns the last hidden state.
    pub fn last_hidden(&self, g: &mut Graph, store: &ParamStore, seq: &[Var]) -> Result<Var> {
        if seq.is_empty() {
            return Err(Error::dim("lstm", "empty sequence"));
        }
        let mut state = self.zero_state(g);
        for &x in seq {
            state = self.step(g, store, x, &state)?;
        }
        Ok(state.h)
    }
}

/// Square-kernel convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = c_in * k * k;
        let fan_out = c_out * k * k;
        let w = store.insert_glorot(format!("{name}.weight"), &[c_out, c_in, k, k], fan_in, fan_out, rng)?;
        let b = store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b, stride, pad: k / 2 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Scaled dot-product attention `softmax(q kᵀ / sqrt(d) + bias) v`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, logit_bias: Option<Var>) -> Result<Var> {
    let d = g.shape(k)[1] as f64;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / d.sqrt())?;
    if let Some(bias) = logit_bias {
        scores = g.add(scores, bias)?;
    }
    let weights = g.softmax_rows(scores)?;
    g.matmul(weights, v)
}
