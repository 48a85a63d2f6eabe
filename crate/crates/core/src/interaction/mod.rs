//! Stage two: temporal interaction graph over stage-one detections and
//! per-pair action scoring.

mod graph;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{encode_pairs, BoundingBox, SPATIAL_DIM};
use crate::numeric::layers::{LayerNorm, Linear, Lstm};
use crate::numeric::{Graph, ParamStore, Tensor, Var};
use crate::simdata::PriorTable;
use crate::types::{Detection, Quintuple, Role};

pub use graph::{argmax_first, build_graph, resolve_inter_frame, InterEdge, InteractionGraph};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InteractionConfig {
    pub num_actions: usize,
    pub feature_dim: usize,
    pub roi_size: usize,
    /// Inter-frame message passing along resolved instance chains.
    pub use_inter: bool,
    /// Intra-frame instrument-tissue message passing.
    pub use_intra: bool,
    /// Quintuples scoring at or below this are not emitted.
    pub emission_threshold: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            num_actions: 5,
            feature_dim: 64,
            roi_size: 7,
            use_inter: true,
            use_intra: true,
            emission_threshold: 0.05,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_actions == 0 || self.feature_dim == 0 || self.roi_size == 0 {
            return Err(Error::Config("num_actions, feature_dim and roi_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.emission_threshold) {
            return Err(Error::Config("emission_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `FC(ReLU(FC(FC(a) ⊙ FC(b) + FC(SE))))` over all (a, b) row pairs.
#[derive(Clone, Debug)]
pub struct PairNet {
    fa: Linear,
    fb: Linear,
    fse: Linear,
    fh: Linear,
    pub(crate) fo: Linear,
}

impl PairNet {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fa: Linear::new(store, &format!("{name}.fa"), d, d, rng)?,
            fb: Linear::new(store, &format!("{name}.fb"), d, d, rng)?,
            fse: Linear::new(store, &format!("{name}.fse"), SPATIAL_DIM, d, rng)?,
            fh: Linear::new(store, &format!("{name}.fh"), d, d, rng)?,
            fo: Linear::new(store, &format!("{name}.fo"), d, 1, rng)?,
        })
    }

    /// Weights `[n_a, n_b]`; `se` holds the `[n_a * n_b, 16]` pair encodings.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, a: Var, b: Var, se: &Tensor) -> Result<Var> {
        let (na, nb) = (g.shape(a)[0], g.shape(b)[0]);
        let ia: Vec<usize> = (0..na).flat_map(|i| std::iter::repeat_n(i, nb)).collect();
        let ib: Vec<usize> = (0..na).flat_map(|_| 0..nb).collect();
        let pa = self.fa.forward(g, store, a)?;
        let pb = self.fb.forward(g, store, b)?;
        let pa = g.gather_rows(pa, &ia)?;
        let pb = g.gather_rows(pb, &ib)?;
        let prod = g.mul(pa, pb)?;
        let se = g.constant(se.clone());
        let s = self.fse.forward(g, store, se)?;
        let x = g.add(prod, s)?;
        let h = self.fh.forward(g, store, x)?;
        let h = g.relu(h)?;
        let w = self.fo.forward(g, store, h)?;
        g.reshape(w, &[na, nb])
    }
}

/// Frozen-backbone inputs for one snippet; the last frame is the key frame.
#[derive(Clone, Copy, Debug)]
pub struct NodeInputs<'a> {
    pub maps: &'a [Var],
    pub detections: &'a [Vec<Detection>],
    pub frame_w: f64,
    pub frame_h: f64,
    /// Feature-cell stride in frame pixels.
    pub stride: f64,
}

/// Action probabilities for every key-frame (instrument, tissue) pair.
#[derive(Clone, Debug)]
pub struct PairScores {
    /// `[pairs, A]`
    pub s_a: Var,
    /// Key-frame detection indices, instrument-major.
    pub pairs: Vec<(usize, usize)>,
    pub graph: InteractionGraph,
}

#[derive(Clone, Debug)]
pub struct InteractionModel {
    pub cfg: InteractionConfig,
    pub store: ParamStore,
    box_head: Linear,
    tw: PairNet,
    inter_lstm: Lstm,
    intra: PairNet,
    ln_i: LayerNorm,
    ln_t: LayerNorm,
    ro_i: Linear,
    ro_t: Linear,
    ro_se: Linear,
    ro_gap: Linear,
    ro_mix: Linear,
    ro_ln: LayerNorm,
    pub(crate) ro_out: Linear,
}

impl InteractionModel {
    pub fn new(cfg: InteractionConfig, map_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let d = cfg.feature_dim;
        let p = cfg.roi_size;
        Ok(Self {
            box_head: Linear::new(&mut s, "int.box_head", map_channels * p * p, d, rng)?,
            tw: PairNet::new(&mut s, "int.tw", d, rng)?,
            inter_lstm: Lstm::new(&mut s, "int.inter_lstm", d, d, rng)?,
            intra: PairNet::new(&mut s, "int.intra", d, rng)?,
            ln_i: LayerNorm::new(&mut s, "int.ln_i", d)?,
            ln_t: LayerNorm::new(&mut s, "int.ln_t", d)?,
            ro_i: Linear::new(&mut s, "int.readout.ins", d, d, rng)?,
            ro_t: Linear::new(&mut s, "int.readout.tis", d, d, rng)?,
            ro_se: Linear::new(&mut s, "int.readout.se", SPATIAL_DIM, d, rng)?,
            ro_gap: Linear::new(&mut s, "int.readout.gap", map_channels, d, rng)?,
            ro_mix: Linear::new(&mut s, "int.readout.mix", d, d, rng)?,
            ro_ln: LayerNorm::new(&mut s, "int.readout.ln", d)?,
            ro_out: Linear::new(&mut s, "int.readout.out", d, cfg.num_actions, rng)?,
            cfg,
            store: s,
        })
    }

    /// Box-head features `[n, d]` for detections on one frame.
    pub fn node_features(&self, g: &mut Graph, map: Var, boxes: &[BoundingBox], stride: f64) -> Result<Var> {
        let pooled = g.roi_align(map, boxes, self.cfg.roi_size, stride)?;
        let h = self.box_head.forward(g, &self.store, pooled)?;
        g.relu(h)
    }

    /// Temporal weights `[1, n_r]` of reference candidates for a key node.
    pub fn tw_head(&self, g: &mut Graph, key: Var, cands: Var, se: &Tensor) -> Result<Var> {
        self.tw.forward(g, &self.store, key, cands, se)
    }

    /// `f + LSTM_last(chain)`; `chain` ends with `f`.
    pub fn inter_passing(&self, g: &mut Graph, chain: &[Var]) -> Result<Var> {
        let last = *chain.last().ok_or_else(|| Error::dim("inter_passing", "empty chain"))?;
        let h = self.inter_lstm.last_hidden(g, &self.store, chain)?;
        g.add(last, h)
    }

    /// Raw intra-frame weights `[n_i, n_t]`.
    pub fn intra_weights(&self, g: &mut Graph, f_i: Var, f_t: Var, se: &Tensor) -> Result<Var> {
        self.intra.forward(g, &self.store, f_i, f_t, se)
    }

    /// Bidirectional update `LN(f_i + w f_t)`, `LN(f_t + wᵀ f_i)`.
    pub fn intra_passing(&self, g: &mut Graph, f_i: Var, f_t: Var, w: Var) -> Result<(Var, Var)> {
        let m_i = g.matmul(w, f_t)?;
        let wt = g.transpose(w)?;
        let m_t = g.matmul(wt, f_i)?;
        let a = g.add(f_i, m_i)?;
        let b = g.add(f_t, m_t)?;
        Ok((self.ln_i.forward(g, &self.store, a)?, self.ln_t.forward(g, &self.store, b)?))
    }

    /// Sigmoid action scores `[n_i * n_t, A]`, instrument-major.
    pub fn readout(&self, g: &mut Graph, f_i: Var, f_t: Var, se: &Tensor, key_map: Var) -> Result<Var> {
        let (ni, nt) = (g.shape(f_i)[0], g.shape(f_t)[0]);
        let ii: Vec<usize> = (0..ni).flat_map(|i| std::iter::repeat_n(i, nt)).collect();
        let it: Vec<usize> = (0..ni).flat_map(|_| 0..nt).collect();
        let a = self.ro_i.forward(g, &self.store, f_i)?;
        let a = g.gather_rows(a, &ii)?;
        let b = self.ro_t.forward(g, &self.store, f_t)?;
        let b = g.gather_rows(b, &it)?;
        let se = g.constant(se.clone());
        let c = self.ro_se.forward(g, &self.store, se)?;
        let gap = g.global_average_pool(key_map)?;
        let e = self.ro_gap.forward(g, &self.store, gap)?;
        let x = g.add(a, b)?;
        let x = g.add(x, c)?;
        let x = g.add(x, e)?;
        let x = self.ro_mix.forward(g, &self.store, x)?;
        let x = self.ro_ln.forward(g, &self.store, x)?;
        let x = g.relu(x)?;
        let logits = self.ro_out.forward(g, &self.store, x)?;
        g.sigmoid(logits)
    }

    /// Full forward pass; `None` when the key frame lacks instruments or tissues.
    pub fn forward(&self, g: &mut Graph, inp: &NodeInputs) -> Result<Option<PairScores>> {
        let dets = inp.detections;
        if dets.is_empty() || inp.maps.len() != dets.len() {
            return Err(Error::dim("interaction", "one feature map per detection frame required"));
        }
        let key = dets.len() - 1;
        let has = |r: Role| dets[key].iter().any(|d| d.role == r);
        if !has(Role::Instrument) || !has(Role::Tissue) {
            return Ok(None);
        }
        let frames_needed: Vec<usize> = if self.cfg.use_inter { (0..=key).collect() } else { vec![key] };
        let mut feats: Vec<Option<Var>> = vec![None; key + 1];
        for &f in &frames_needed {
            if !dets[f].is_empty() {
                let boxes: Vec<BoundingBox> = dets[f].iter().map(|d| d.bbox).collect();
                feats[f] = Some(self.node_features(g, inp.maps[f], &boxes, inp.stride)?);
            }
        }
        let key_feats = feats[key].expect("key frame has detections");

        // Graph building records the TW scores for straight-through gradients.
        let mut picks: Vec<(usize, usize, Var, Vec<usize>)> = Vec::new();
        let graph = build_graph(dets, self.cfg.use_inter, |o, f, cands| {
            let kf = g.gather_rows(key_feats, &[o])?;
            let cf = g.gather_rows(feats[f].expect("candidates exist"), cands)?;
            let kb = [dets[key][o].bbox];
            let cb: Vec<BoundingBox> = cands.iter().map(|&c| dets[f][c].bbox).collect();
            let se = encode_pairs(&kb, &cb, inp.frame_w, inp.frame_h)?.reshaped(&[cb.len(), SPATIAL_DIM])?;
            let w = self.tw_head(g, kf, cf, &se)?;
            let i = argmax_first(g.value(w).data()).expect("non-empty candidates");
            picks.push((o, f, w, cands.to_vec()));
            Ok(i)
        })?;

        let n_key = dets[key].len();
        let mut node_rows: Vec<Var> = Vec::with_capacity(n_key);
        for o in 0..n_key {
            let f_o = g.gather_rows(key_feats, &[o])?;
            if !self.cfg.use_inter {
                node_rows.push(f_o);
                continue;
            }
            let mut chain = Vec::new();
            for (f, n) in graph.chain(o) {
                if f == key {
                    chain.push(f_o);
                    continue;
                }
                let fv = feats[f].expect("chain frame has detections");
                let hard = g.gather_rows(fv, &[n])?;
                let soft = picks.iter().find(|p| p.0 == o && p.1 == f);
                chain.push(match soft {
                    Some((_, _, w, cands)) => straight_through(g, hard, *w, fv, cands)?,
                    None => hard,
                });
            }
            node_rows.push(self.inter_passing(g, &chain)?);
        }

        let ins = graph.instruments();
        let tis = graph.tissues();
        let nodes = g.concat_rows(&node_rows)?;
        let mut f_i = g.gather_rows(nodes, &ins)?;
        let mut f_t = g.gather_rows(nodes, &tis)?;
        let ib: Vec<BoundingBox> = ins.iter().map(|&i| dets[key][i].bbox).collect();
        let tb: Vec<BoundingBox> = tis.iter().map(|&t| dets[key][t].bbox).collect();
        let se = encode_pairs(&ib, &tb, inp.frame_w, inp.frame_h)?.reshaped(&[ib.len() * tb.len(), SPATIAL_DIM])?;
        if self.cfg.use_intra {
            let w = self.intra_weights(g, f_i, f_t, &se)?;
            (f_i, f_t) = self.intra_passing(g, f_i, f_t, w)?;
        }
        let s_a = self.readout(g, f_i, f_t, &se, inp.maps[key])?;
        Ok(Some(PairScores {
            s_a,
            pairs: graph.intra.clone(),
            graph,
        }))
    }

    /// Scored quintuples for the key frame after prior masking.
    /// `g` must be the graph holding `inp.maps`.
    pub fn predict(&self, g: &mut Graph, inp: &NodeInputs, prior: &PriorTable) -> Result<Vec<Quintuple>> {
        let Some(out) = self.forward(g, inp)? else {
            return Ok(Vec::new());
        };
        let key = &inp.detections[inp.detections.len() - 1];
        let s_a = g.value(out.s_a);
        let mut quints = Vec::new();
        for (p, &(i, t)) in out.pairs.iter().enumerate() {
            let (di, dt) = (&key[i], &key[t]);
            let adm = prior.admissible(di.category, dt.category);
            let s = apply_prior(s_a.row(p), di.score, dt.score, &adm);
            for (a, &score) in s.iter().enumerate() {
                if score > self.cfg.emission_threshold {
                    quints.push(Quintuple {
                        instrument: di.category,
                        instrument_box: di.bbox,
                        tissue: dt.category,
                        tissue_box: dt.bbox,
                        action: a,
                        score,
                    });
                }
            }
        }
        Ok(quints)
    }
}

/// Forward value of `hard`, gradient of the softmax-weighted candidate mix.
fn straight_through(g: &mut Graph, hard: Var, weights: Var, feats: Var, cands: &[usize]) -> Result<Var> {
    let probs = g.softmax_rows(weights)?;
    let cf = g.gather_rows(feats, cands)?;
    let soft = g.matmul(probs, cf)?;
    let frozen = g.constant(g.value(soft).clone());
    let neg = g.scale(frozen, -1.0)?;
    let zero = g.add(soft, neg)?;
    g.add(hard, zero)
}

/// `s = s_a · s_i · s_t` on admissible actions, zero elsewhere.
pub fn apply_prior(s_a: &[f64], s_i: f64, s_t: f64, admissible: &[bool]) -> Vec<f64> {
    s_a.iter()
        .enumerate()
        .map(|(a, &v)| if admissible.get(a).copied().unwrap_or(true) { v * s_i * s_t } else { 0.0 })
        .collect()
}
