//! Stage one: instance detection with snippet-context fusion (SCF) and
//! spatial-context aggregation (SCA) refinement.

pub mod boxes;
mod layers;
pub mod proposals;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms, BoundingBox};
use crate::numeric::layers::{Conv2d, Linear};
use crate::numeric::{Graph, ParamStore, Tensor, Var};
use crate::types::{Detection, Role};

pub use layers::{ScaLayer, ScfLayer};
pub use proposals::{jitter_box, propose, JitterConfig, ProposalSet};

/// Smooth-L1 transition point for box regression.
pub const BOX_BETA: f64 = 1.0 / 9.0;
/// Proposal-to-GT IoU needed for a foreground label.
pub const FG_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    pub num_instruments: usize,
    pub num_tissues: usize,
    /// Output channels of the stride-2 convolutions.
    pub backbone_channels: Vec<usize>,
    pub feature_dim: usize,
    pub roi_size: usize,
    pub num_proposals: usize,
    pub jitter: JitterConfig,
    pub use_scf: bool,
    pub use_sca: bool,
    /// Spatial weight in SCA; off gives the plain cross-frame attention variant.
    pub sca_spatial: bool,
    pub spatial_hidden: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_per_role: usize,
    /// Frames are bilinearly resized to this height before the backbone.
    pub input_height: Option<usize>,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            num_instruments: 4,
            num_tissues: 4,
            backbone_channels: vec![16, 32, 64],
            feature_dim: 64,
            roi_size: 7,
            num_proposals: 32,
            jitter: JitterConfig::default(),
            use_scf: true,
            use_sca: true,
            sca_spatial: true,
            spatial_hidden: 32,
            score_threshold: 0.2,
            nms_iou: 0.5,
            max_per_role: 5,
            input_height: Some(112),
        }
    }
}

impl DetectionConfig {
    pub fn num_classes(&self) -> usize {
        self.num_instruments + self.num_tissues
    }

    pub fn background(&self) -> usize {
        self.num_classes()
    }

    pub fn class_index(&self, role: Role, category: usize) -> usize {
        match role {
            Role::Instrument => category,
            Role::Tissue => self.num_instruments + category,
        }
    }

    pub fn class_of(&self, k: usize) -> Option<(Role, usize)> {
        if k < self.num_instruments {
            Some((Role::Instrument, k))
        } else if k < self.num_classes() {
            Some((Role::Tissue, k - self.num_instruments))
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_instruments == 0 || self.num_tissues == 0 {
            return bad("detection needs at least one instrument and one tissue class");
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone_channels must be non-empty and positive");
        }
        if self.feature_dim == 0 || self.roi_size == 0 || self.num_proposals == 0 || self.spatial_hidden == 0 {
            return bad("feature_dim, roi_size, num_proposals and spatial_hidden must be positive");
        }
        if !(self.jitter.scale_min > 0.0 && self.jitter.scale_min <= self.jitter.scale_max) || self.jitter.center < 0.0 {
            return bad("jitter ranges invalid");
        }
        if self.input_height == Some(0) {
            return bad("input_height must be positive");
        }
        Ok(())
    }
}

/// Stack of 3x3 stride-2 convolutions with ReLU.
#[derive(Clone, Debug)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    pub out_channels: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 3;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), c_in, c, 3, 2, rng)?);
            c_in = c;
        }
        Ok(Self { convs, out_channels: c_in })
    }

    pub fn stride(&self) -> usize {
        1 << self.convs.len()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Var> {
        let mut x = image;
        for conv in &self.convs {
            let y = conv.forward(g, store, x)?;
            x = g.relu(y)?;
        }
        Ok(x)
    }
}

/// Bilinear resize of a `[c, h, w]` image (half-pixel centres).
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::dim("resize", format!("expected [c, h, w], got {:?}", img.shape())));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = Tensor::zeros(&[c, out_h, out_w]);
    let dst = out.data_mut();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(ch * h + y) * w + x];
                let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                dst[(ch * out_h + oy) * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Ok(out)
}

/// Outputs of the heads for one key frame.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[N_p, C_i + C_t + 1]`
    pub logits: Var,
    /// `[N_p, 4 (C_i + C_t)]`
    pub deltas: Var,
    /// Refined proposal features `[N_p, d]`.
    pub features: Var,
}

/// Classification and regression targets for one key frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub labels: Vec<usize>,
    pub box_targets: Tensor,
    pub box_weights: Tensor,
}

#[derive(Clone, Debug)]
pub struct DetectionModel {
    pub cfg: DetectionConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    box_head: Linear,
    scf: Option<ScfLayer>,
    sca: Option<ScaLayer>,
    cls: Linear,
    reg: Linear,
}

impl DetectionModel {
    pub fn new(cfg: DetectionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, "backbone", &cfg.backbone_channels, rng)?;
        let c = backbone.out_channels;
        let d = cfg.feature_dim;
        let p = cfg.roi_size;
        let box_head = Linear::new(&mut store, "det.box_head", c * p * p, d, rng)?;
        let scf = if cfg.use_scf {
            Some(ScfLayer::new(&mut store, "det.scf", c, d, rng)?)
        } else {
            None
        };
        let sca = if cfg.use_sca {
            Some(ScaLayer::new(&mut store, "det.sca", d, cfg.spatial_hidden, cfg.sca_spatial, rng)?)
        } else {
            None
        };
        // Context branches start as the identity: zero value projections.
        for id in scf.iter().map(|l| l.value_projection()).chain(sca.iter().map(|l| l.value_projection())) {
            store.get_mut(id).value.data_mut().fill(0.0);
        }
        let cls = Linear::new(&mut store, "det.cls", d, cfg.num_classes() + 1, rng)?;
        let reg = Linear::new(&mut store, "det.reg", d, 4 * cfg.num_classes(), rng)?;
        Ok(Self {
            cfg,
            store,
            backbone,
            box_head,
            scf,
            sca,
            cls,
            reg,
        })
    }

    /// Stride of feature cells measured in original frame pixels.
    pub fn effective_stride(&self, frame_h: usize) -> f64 {
        let s = self.backbone.stride() as f64;
        match self.cfg.input_height {
            Some(h) => s * frame_h as f64 / h as f64,
            None => s,
        }
    }

    fn prepare(&self, frame: &Tensor) -> Result<Tensor> {
        match self.cfg.input_height {
            Some(h) => {
                let [_, fh, fw] = frame.shape()[..] else {
                    return Err(Error::dim("backbone", format!("frame must be [3, H, W], got {:?}", frame.shape())));
                };
                if fh == h {
                    return Ok(frame.clone());
                }
                let w = ((fw as f64 * h as f64 / fh as f64).round() as usize).max(1);
                resize_bilinear(frame, h, w)
            }
            None => Ok(frame.clone()),
        }
    }

    /// Backbone maps for every frame (tracked when `track` is set).
    pub fn feature_maps(&self, g: &mut Graph, frames: &[Tensor], track: bool) -> Result<Vec<Var>> {
        frames
            .iter()
            .map(|f| {
                if f.shape().len() != 3 || f.shape()[0] != 3 {
                    return Err(Error::dim("backbone", format!("frames must be [3, H, W], got {:?}", f.shape())));
                }
                let x = self.prepare(f)?;
                if track {
                    let x = g.constant(x);
                    self.backbone.forward(g, &self.store, x)
                } else {
                    let mut tmp = Graph::new();
                    let x = tmp.constant(x);
                    let y = self.backbone.forward(&mut tmp, &self.store, x)?;
                    Ok(g.constant(tmp.value(y).clone()))
                }
            })
            .collect()
    }

    /// Box-head features `[n, d]` for boxes on one map.
    pub fn roi_features(&self, g: &mut Graph, fmap: Var, boxes: &[BoundingBox], stride: f64) -> Result<Var> {
        let pooled = g.roi_align(fmap, boxes, self.cfg.roi_size, stride)?;
        let h = self.box_head.forward(g, &self.store, pooled)?;
        g.relu(h)
    }

    /// Heads for key frame `key` using frames `0..=key` as its snippet.
    pub fn forward_key(
        &self,
        g: &mut Graph,
        fmaps: &[Var],
        proposals: &[Vec<BoundingBox>],
        key: usize,
        frame_w: usize,
        frame_h: usize,
    ) -> Result<HeadOutput> {
        if fmaps.len() <= key || proposals.len() <= key {
            return Err(Error::dim("forward_key", "key frame index beyond snippet"));
        }
        let stride = self.effective_stride(frame_h);
        let f_v = self.roi_features(g, fmaps[key], &proposals[key], stride)?;
        let mut f = f_v;
        if let Some(scf) = &self.scf {
            let gaps = fmaps[..=key]
                .iter()
                .map(|&m| g.global_average_pool(m))
                .collect::<Result<Vec<_>>>()?;
            f = scf.forward(g, &self.store, &gaps, f)?;
        }
        if let Some(sca) = &self.sca {
            if key == 0 {
                log::debug!("no reference frames; SCA is the identity");
            } else {
                let mut refs = Vec::with_capacity(key);
                let mut ref_boxes = Vec::new();
                for j in 0..key {
                    refs.push(self.roi_features(g, fmaps[j], &proposals[j], stride)?);
                    ref_boxes.extend_from_slice(&proposals[j]);
                }
                let ref_feats = g.concat_rows(&refs)?;
                f = sca.forward(g, &self.store, f, ref_feats, &proposals[key], &ref_boxes, frame_w as f64, frame_h as f64)?;
            }
        }
        let logits = self.cls.forward(g, &self.store, f)?;
        let deltas = self.reg.forward(g, &self.store, f)?;
        Ok(HeadOutput {
            logits,
            deltas,
            features: f,
        })
    }

    /// Labels and class-specific regression targets for proposals.
    pub fn targets(&self, proposals: &[BoundingBox], gt: &[Detection]) -> Targets {
        crate::training::assign_stage1_targets(&self.cfg, proposals, gt, FG_IOU)
    }

    pub fn loss(&self, g: &mut Graph, out: &HeadOutput, targets: &Targets) -> Result<Var> {
        crate::training::stage1_loss(g, out, targets)
    }

    /// Scored, decoded candidates (one per proposal and foreground class).
    pub fn decode(&self, g: &Graph, out: &HeadOutput, proposals: &[BoundingBox], frame: usize, frame_w: usize, frame_h: usize) -> Vec<Detection> {
        let logits = g.value(out.logits);
        let deltas = g.value(out.deltas);
        let kc = self.cfg.num_classes();
        let mut dets = Vec::new();
        for (i, p) in proposals.iter().enumerate() {
            let probs = softmax(logits.row(i));
            let drow = deltas.row(i);
            for (cls, &prob) in probs.iter().enumerate().take(kc) {
                let Some((role, category)) = self.cfg.class_of(cls) else { continue };
                let bbox = boxes::decode(p, &drow[4 * cls..4 * cls + 4]).clip(frame_w as f64, frame_h as f64);
                if bbox.is_valid() {
                    dets.push(Detection::new(role, category, bbox, prob).with_frame(frame));
                }
            }
        }
        dets
    }

    /// Detections for every frame of a snippet; frame `j` is treated as the
    /// key frame of the sub-snippet `0..=j`.
    pub fn detect_snippet(&self, frames: &[Tensor], proposals: &[Vec<BoundingBox>]) -> Result<Vec<Vec<Detection>>> {
        let [_, h, w] = frames[0].shape()[..] else {
            return Err(Error::dim("detect", "frames must be [3, H, W]"));
        };
        let maps = self.feature_map_values(frames)?;
        self.detect_from_maps(&maps, proposals, w, h)
    }

    /// As [`Self::detect_snippet`] with precomputed backbone maps.
    pub fn detect_from_maps(&self, maps: &[Tensor], proposals: &[Vec<BoundingBox>], frame_w: usize, frame_h: usize) -> Result<Vec<Vec<Detection>>> {
        (0..maps.len())
            .map(|j| {
                let mut g = Graph::new();
                let vars: Vec<Var> = maps[..=j].iter().map(|m| g.constant(m.clone())).collect();
                let out = self.forward_key(&mut g, &vars, proposals, j, frame_w, frame_h)?;
                let cands = self.decode(&g, &out, &proposals[j], j, frame_w, frame_h);
                Ok(select_outputs(cands, &self.cfg))
            })
            .collect()
    }

    /// Backbone maps as plain tensors (for the frozen second stage).
    pub fn feature_map_values(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let maps = self.feature_maps(&mut g, frames, false)?;
        Ok(maps.into_iter().map(|m| g.value(m).clone()).collect())
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Score threshold, per-category NMS, then the top detections of each role.
pub fn select_outputs(dets: Vec<Detection>, cfg: &DetectionConfig) -> Vec<Detection> {
    let kept: Vec<Detection> = dets.into_iter().filter(|d| d.score >= cfg.score_threshold).collect();
    let survivors = nms(&kept, cfg.nms_iou);
    let mut out = Vec::new();
    for role in [Role::Instrument, Role::Tissue] {
        out.extend(survivors.iter().filter(|d| d.role == role).take(cfg.max_per_role).cloned());
    }
    out
}
