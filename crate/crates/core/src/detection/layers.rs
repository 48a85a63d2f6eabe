use rand::Rng;

use crate::error::Result;
use crate::geometry::{encode_pairs, BoundingBox, SPATIAL_DIM};
use crate::numeric::layers::{attention, Linear, Lstm};
use crate::numeric::{Graph, ParamId, ParamStore, Var};

fn projection(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<ParamId> {
    store.insert_glorot(name, &[d_in, d_out], d_in, d_out, rng)
}

fn project(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId) -> Result<Var> {
    let w = g.param(store, w);
    g.matmul(x, w)
}

/// Snippet-context fusion: self-attention over key-frame proposals with
/// queries and keys modulated by a snippet context vector.
#[derive(Clone, Debug)]
pub struct ScfLayer {
    lstm: Lstm,
    pub(crate) w_g: ParamId,
    pub(crate) w_q: ParamId,
    pub(crate) w_k: ParamId,
    pub(crate) w_v: ParamId,
}

impl ScfLayer {
    pub fn new(store: &mut ParamStore, name: &str, map_channels: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            lstm: Lstm::new(store, &format!("{name}.lstm"), map_channels, d, rng)?,
            w_g: projection(store, &format!("{name}.w_g"), d, d, rng)?,
            w_q: projection(store, &format!("{name}.w_q"), d, d, rng)?,
            w_k: projection(store, &format!("{name}.w_k"), d, d, rng)?,
            w_v: projection(store, &format!("{name}.w_v"), d, d, rng)?,
        })
    }

    /// Context vector `G` `[1, d]` from per-frame pooled maps, oldest first.
    pub fn context(&self, g: &mut Graph, store: &ParamStore, pooled: &[Var]) -> Result<Var> {
        let f_g = self.lstm.last_hidden(g, store, pooled)?;
        project(g, store, f_g, self.w_g)
    }

    /// `f_v + softmax((Q⊙G)(K⊙G)ᵀ/√d) V`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, pooled: &[Var], f_v: Var) -> Result<Var> {
        let ctx = self.context(g, store, pooled)?;
        self.attend(g, store, f_v, ctx)
    }

    pub fn attend(&self, g: &mut Graph, store: &ParamStore, f_v: Var, ctx: Var) -> Result<Var> {
        let q = project(g, store, f_v, self.w_q)?;
        let k = project(g, store, f_v, self.w_k)?;
        let v = project(g, store, f_v, self.w_v)?;
        let qg = g.mul(q, ctx)?;
        let kg = g.mul(k, ctx)?;
        let fused = attention(g, qg, kg, v, None)?;
        g.add(f_v, fused)
    }

    pub fn value_projection(&self) -> ParamId {
        self.w_v
    }
}

/// Spatial-context aggregation: key proposals attend to reference-frame
/// proposals with a learned spatial bias on the logits.
#[derive(Clone, Debug)]
pub struct ScaLayer {
    pub(crate) spatial1: Linear,
    pub(crate) spatial2: Linear,
    pub(crate) w_q: ParamId,
    pub(crate) w_k: ParamId,
    pub(crate) w_v: ParamId,
    pub use_spatial: bool,
}

impl ScaLayer {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, use_spatial: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            spatial1: Linear::new(store, &format!("{name}.spatial1"), SPATIAL_DIM, hidden, rng)?,
            spatial2: Linear::new(store, &format!("{name}.spatial2"), hidden, 1, rng)?,
            w_q: projection(store, &format!("{name}.w_q"), d, d, rng)?,
            w_k: projection(store, &format!("{name}.w_k"), d, d, rng)?,
            w_v: projection(store, &format!("{name}.w_v"), d, d, rng)?,
            use_spatial,
        })
    }

    /// Spatial weights `[n_key, n_ref]` from pairwise box encodings.
    pub fn spatial_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        key_boxes: &[BoundingBox],
        ref_boxes: &[BoundingBox],
        frame_w: f64,
        frame_h: f64,
    ) -> Result<Var> {
        let se = encode_pairs(key_boxes, ref_boxes, frame_w, frame_h)?;
        let se = se.reshaped(&[key_boxes.len() * ref_boxes.len(), SPATIAL_DIM])?;
        let x = g.constant(se);
        let h = self.spatial1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let w = self.spatial2.forward(g, store, h)?;
        g.reshape(w, &[key_boxes.len(), ref_boxes.len()])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f_key: Var,
        f_ref: Var,
        key_boxes: &[BoundingBox],
        ref_boxes: &[BoundingBox],
        frame_w: f64,
        frame_h: f64,
    ) -> Result<Var> {
        let q = project(g, store, f_key, self.w_q)?;
        let k = project(g, store, f_ref, self.w_k)?;
        let v = project(g, store, f_ref, self.w_v)?;
        let bias = if self.use_spatial {
            Some(self.spatial_weights(g, store, key_boxes, ref_boxes, frame_w, frame_h)?)
        } else {
            None
        };
        let agg = attention(g, q, k, v, bias)?;
        g.add(f_key, agg)
    }

    pub fn value_projection(&self) -> ParamId {
        self.w_v
    }
}
