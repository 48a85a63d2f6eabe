//! Label assignment, losses, learning-rate schedule and the two training loops.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::boxes;
use crate::detection::{DetectionConfig, DetectionModel, HeadOutput, Targets, BOX_BETA};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::interaction::{InteractionModel, NodeInputs};
use crate::numeric::optim::SgdMomentum;
use crate::numeric::{Graph, Tensor, Var};
use crate::pipeline::{evaluate, run_stage1, snippet_proposals, Stage1Output};
use crate::simdata::{AnnotatedSnippet, PriorTable};
use crate::types::{Detection, Quintuple};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// The rate is multiplied by `decay_factor` after each of these epochs.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Joint gradient L2 norm cap; off when absent.
    pub grad_clip_norm: Option<f64>,
    pub seed: u64,
    pub iou_assign_threshold: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Fresh proposals every step; off keeps one fixed set per snippet.
    pub resample_proposals: bool,
    /// Hard cap on optimizer steps over the whole run.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.001,
            decay_epochs: vec![10, 15],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 0.0001,
            grad_clip_norm: None,
            seed: 0,
            iou_assign_threshold: 0.5,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            resample_proposals: true,
            max_steps: None,
        }
    }

    pub fn stage2() -> Self {
        Self {
            learning_rate: 0.0001,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::Config(format!("decay epoch {e} is not below the epoch count {}", self.epochs)));
        }
        let rates = [
            ("learning_rate", self.learning_rate),
            ("decay_factor", self.decay_factor),
            ("focal_alpha", self.focal_alpha),
        ];
        if let Some((name, v)) = rates.iter().find(|(_, v)| *v <= 0.0 || !v.is_finite()) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.focal_gamma < 0.0 {
            return Err(Error::Config("momentum must lie in [0, 1); weight_decay and focal_gamma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_assign_threshold) {
            return Err(Error::Config("iou_assign_threshold must lie in [0, 1]".into()));
        }
        if self.grad_clip_norm.is_some_and(|c| c <= 0.0 || !c.is_finite()) {
            return Err(Error::Config("grad_clip_norm must be positive and finite when set".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive when set".into()));
        }
        Ok(())
    }

    /// Rate used during `epoch` (counted from 1).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }
}

/// Proposals overlapping a GT box by at least `threshold` take the
/// best-overlapping GT's class and deltas; the rest are background.
pub fn assign_stage1_targets(cfg: &DetectionConfig, proposals: &[BoundingBox], gt: &[Detection], threshold: f64) -> Targets {
    let n = proposals.len();
    let k = cfg.num_classes();
    let mut labels = vec![cfg.background(); n];
    let mut t = Tensor::zeros(&[n, 4 * k]);
    let mut w = Tensor::zeros(&[n, 4 * k]);
    for (i, p) in proposals.iter().enumerate() {
        let mut best: Option<(f64, &Detection)> = None;
        for d in gt {
            let o = iou(p, &d.bbox);
            if o >= threshold && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, d));
            }
        }
        let Some((_, d)) = best else { continue };
        let cls = cfg.class_index(d.role, d.category);
        labels[i] = cls;
        let enc = boxes::encode(p, &d.bbox);
        let off = i * 4 * k + 4 * cls;
        t.data_mut()[off..off + 4].copy_from_slice(&enc);
        w.data_mut()[off..off + 4].fill(1.0);
    }
    Targets {
        labels,
        box_targets: t,
        box_weights: w,
    }
}

/// Cross-entropy plus smooth-L1 on foreground deltas, both averaged over proposals.
pub fn stage1_loss(g: &mut Graph, out: &HeadOutput, targets: &Targets) -> Result<Var> {
    let ce = g.cross_entropy(out.logits, &targets.labels)?;
    let n = targets.labels.len() as f64;
    let box_loss = g.smooth_l1(out.deltas, &targets.box_targets, &targets.box_weights, BOX_BETA, n)?;
    g.add(ce, box_loss)
}

/// Multi-hot action target of a detected pair against the key frame's GT.
pub fn assign_stage2_targets(instrument: &Detection, tissue: &Detection, gt: &[Quintuple], threshold: f64, num_actions: usize) -> Vec<f64> {
    let mut t = vec![0.0; num_actions];
    for q in gt {
        if q.instrument != instrument.category || q.tissue != tissue.category || q.action >= num_actions {
            continue;
        }
        let o = iou(&instrument.bbox, &q.instrument_box).min(iou(&tissue.bbox, &q.tissue_box));
        if o >= threshold {
            t[q.action] = 1.0;
        }
    }
    t
}

pub fn stage2_loss(g: &mut Graph, s_a: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    g.focal_loss(s_a, targets, alpha, gamma)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub map_it: Option<f64>,
    pub map_iti: Option<f64>,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        // No pairs at all leaves the loss undefined.
        let loss = Some(self.loss).filter(|l| l.is_finite());
        write!(f, "{}, {}, {}, {}, {}", self.epoch, self.split, opt(loss), opt(self.map_it), opt(self.map_iti))
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<EpochMetrics>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.step_losses.len()
    }

    pub fn log_text(&self) -> String {
        self.log.iter().map(|m| format!("{m}\n")).collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn stage1_step_loss(model: &DetectionModel, g: &mut Graph, s: &AnnotatedSnippet, proposals: &[Vec<BoundingBox>], track: bool, thr: f64) -> Result<Var> {
    if let Some(f) = s.frames.iter().position(|f| !f.is_finite()) {
        return Err(Error::Numerical(format!("frame {f} holds non-finite pixels")));
    }
    let fmaps = model.feature_maps(g, &s.frames, track)?;
    let key = s.key_index();
    let out = model.forward_key(g, &fmaps, proposals, key, s.width, s.height)?;
    let targets = assign_stage1_targets(&model.cfg, &proposals[key], &s.instances[key], thr);
    stage1_loss(g, &out, &targets)
}

fn step(opt: &mut SgdMomentum, store: &mut crate::numeric::ParamStore, g: &mut Graph, loss: Var) -> Result<f64> {
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::Numerical(format!("loss is {v}")));
    }
    g.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(g);
    opt.step(store)?;
    Ok(v)
}

/// Adds where it happened to a numerical failure.
fn located(e: Error, stage: u8, epoch: usize, step: usize, id: u64) -> Error {
    if e.is_numerical() {
        Error::Numerical(format!("stage {stage}, epoch {epoch}, step {step} (snippet {id}): {e}"))
    } else {
        e
    }
}

/// Trains the detector; logs train loss and, with a validation set, its loss and mAP_IT.
pub fn train_stage1(model: &mut DetectionModel, cfg: &TrainConfig, train: &[AnnotatedSnippet], val: Option<&[AnnotatedSnippet]>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    opt.clip_norm = cfg.grad_clip_norm;
    let fixed: Vec<_> = if cfg.resample_proposals {
        Vec::new()
    } else {
        train.iter().map(|s| snippet_proposals(&model.cfg, s, cfg.seed)).collect()
    };
    let mut out = TrainOutcome::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        opt.learning_rate = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for &i in &order {
            if cfg.max_steps.is_some_and(|m| out.steps() >= m) {
                finish_epoch(&mut out, epoch, &losses);
                break 'epochs;
            }
            let s = &train[i];
            let drawn;
            let proposals = if cfg.resample_proposals {
                drawn = (0..s.frames.len())
                    .map(|f| {
                        crate::detection::propose(&s.gt_boxes(f), &model.cfg.jitter, model.cfg.num_proposals, s.width as f64, s.height as f64, &mut rng).boxes
                    })
                    .collect::<Vec<_>>();
                &drawn
            } else {
                &fixed[i]
            };
            let n = out.steps() + 1;
            let v = (|| {
                let mut g = Graph::new();
                let loss = stage1_step_loss(model, &mut g, s, proposals, true, cfg.iou_assign_threshold)?;
                step(&mut opt, &mut model.store, &mut g, loss)
            })()
            .map_err(|e| located(e, 1, epoch, n, s.id))?;
            losses.push(v);
            out.step_losses.push(v);
        }
        finish_epoch(&mut out, epoch, &losses);
        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let mut vl = Vec::with_capacity(val.len());
            for s in val {
                let mut g = Graph::new();
                let p = snippet_proposals(&model.cfg, s, cfg.seed);
                let l = stage1_step_loss(model, &mut g, s, &p, false, cfg.iou_assign_threshold)?;
                vl.push(g.value(l).item());
            }
            let ev = evaluate(model, None, val, cfg.seed)?;
            push(&mut out, EpochMetrics {
                epoch,
                split: "val",
                loss: mean(&vl),
                map_it: ev.it.map,
                map_iti: None,
            });
        }
    }
    Ok(out)
}

fn push(out: &mut TrainOutcome, m: EpochMetrics) {
    log::info!("{m}");
    out.log.push(m);
}

fn finish_epoch(out: &mut TrainOutcome, epoch: usize, losses: &[f64]) {
    if !losses.is_empty() {
        push(out, EpochMetrics {
            epoch,
            split: "train",
            loss: mean(losses),
            map_it: None,
            map_iti: None,
        });
    }
}

/// Forward pass and targets for one cached snippet; `None` without pairs.
fn stage2_forward(model: &InteractionModel, g: &mut Graph, s: &AnnotatedSnippet, st1: &Stage1Output, cfg: &TrainConfig) -> Result<Option<Var>> {
    let maps: Vec<Var> = st1.maps.iter().map(|m| g.constant(m.clone())).collect();
    let inp = NodeInputs {
        maps: &maps,
        detections: &st1.detections,
        frame_w: s.width as f64,
        frame_h: s.height as f64,
        stride: st1.stride,
    };
    let Some(scores) = model.forward(g, &inp)? else {
        return Ok(None);
    };
    let key = &st1.detections[st1.detections.len() - 1];
    let a = model.cfg.num_actions;
    let mut t = Vec::with_capacity(scores.pairs.len() * a);
    for &(i, j) in &scores.pairs {
        t.extend(assign_stage2_targets(&key[i], &key[j], &s.quintuples, cfg.iou_assign_threshold, a));
    }
    let targets = Tensor::new(&[scores.pairs.len(), a], t)?;
    Ok(Some(stage2_loss(g, scores.s_a, &targets, cfg.focal_alpha, cfg.focal_gamma)?))
}

/// Frozen stage-1 outputs for a snippet set.
pub fn stage1_cache(det: &DetectionModel, snippets: &[AnnotatedSnippet], seed: u64) -> Result<Vec<Stage1Output>> {
    snippets.iter().map(|s| run_stage1(det, s, seed)).collect()
}

/// Trains the interaction stage on frozen detector outputs. The detector is
/// only read; its backbone maps enter the graph as constants.
pub fn train_stage2(
    model: &mut InteractionModel,
    det: &DetectionModel,
    prior: &PriorTable,
    cfg: &TrainConfig,
    train: &[AnnotatedSnippet],
    val: Option<&[AnnotatedSnippet]>,
) -> Result<TrainOutcome> {
    let cache = stage1_cache(det, train, cfg.seed)?;
    let val_cache = match val {
        Some(v) => Some((v, stage1_cache(det, v, cfg.seed)?)),
        None => None,
    };
    train_stage2_cached(model, prior, cfg, train, &cache, val_cache.as_ref().map(|(v, c)| (*v, &c[..])))
}

/// As [`train_stage2`] with precomputed stage-1 outputs.
pub fn train_stage2_cached(
    model: &mut InteractionModel,
    prior: &PriorTable,
    cfg: &TrainConfig,
    train: &[AnnotatedSnippet],
    cache: &[Stage1Output],
    val: Option<(&[AnnotatedSnippet], &[Stage1Output])>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || train.len() != cache.len() {
        return Err(Error::Config("training set and stage-1 cache must be non-empty and aligned".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = SgdMomentum::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    opt.clip_norm = cfg.grad_clip_norm;
    let mut out = TrainOutcome::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 1..=cfg.epochs {
        opt.learning_rate = cfg.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(train.len());
        for &i in &order {
            if cfg.max_steps.is_some_and(|m| out.steps() >= m) {
                finish_epoch(&mut out, epoch, &losses);
                break 'epochs;
            }
            let n = out.steps() + 1;
            let v = (|| {
                let mut g = Graph::new();
                match stage2_forward(model, &mut g, &train[i], &cache[i], cfg)? {
                    Some(loss) => step(&mut opt, &mut model.store, &mut g, loss).map(Some),
                    None => Ok(None),
                }
            })()
            .map_err(|e| located(e, 2, epoch, n, train[i].id))?;
            let Some(v) = v else { continue };
            losses.push(v);
            out.step_losses.push(v);
        }
        finish_epoch(&mut out, epoch, &losses);
        if let Some((vs, vc)) = val.filter(|(v, _)| !v.is_empty()) {
            let m = evaluate_cached(model, prior, vs, vc, cfg)?;
            push(&mut out, EpochMetrics { epoch, ..m });
        }
    }
    Ok(out)
}

/// Validation loss and both metrics for cached stage-1 outputs.
fn evaluate_cached(model: &InteractionModel, prior: &PriorTable, snippets: &[AnnotatedSnippet], cache: &[Stage1Output], cfg: &TrainConfig) -> Result<EpochMetrics> {
    let mut losses = Vec::new();
    let mut preds = crate::simdata::Annotations::new();
    for (s, st1) in snippets.iter().zip(cache) {
        let mut g = Graph::new();
        if let Some(l) = stage2_forward(model, &mut g, s, st1, cfg)? {
            losses.push(g.value(l).item());
        }
        let key = crate::types::FrameKey::new(s.id, s.key_index() as u64);
        st1.detections[s.key_index()].iter().for_each(|d| preds.push_instance(key, d.clone()));
        for q in crate::pipeline::run_stage2(model, s, st1, prior)? {
            preds.push_quintuple(key, q);
        }
    }
    let gt = crate::pipeline::key_frame_ground_truth(snippets);
    Ok(EpochMetrics {
        epoch: 0,
        split: "val",
        loss: mean(&losses),
        map_it: crate::evaluation::map_it(&preds, &gt).map,
        map_iti: crate::evaluation::map_iti(&preds, &gt).map,
    })
}

#[cfg(test)]
mod tests;
