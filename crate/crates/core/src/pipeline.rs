//! End-to-end inference over annotated snippets and its evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detection::{propose, DetectionConfig, DetectionModel};
use crate::error::Result;
use crate::evaluation::{map_it, map_iti, MapReport};
use crate::geometry::BoundingBox;
use crate::interaction::{InteractionConfig, InteractionModel, NodeInputs};
use crate::numeric::{Graph, Tensor, Var};
use crate::simdata::{AnnotatedSnippet, Annotations, PriorTable};
use crate::types::{Detection, FrameKey, Quintuple};

/// Separates the interaction stage's initial weights from the detector's.
const INTERACTION_INIT_OFFSET: u64 = 100;

/// Proposal stream used when scoring, distinct from the training streams.
pub const EVAL_PROPOSAL_OFFSET: u64 = 1000;

/// Freshly initialised detector; the weights depend only on `seed`.
pub fn init_detector(cfg: &DetectionConfig, seed: u64) -> Result<DetectionModel> {
    DetectionModel::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Freshly initialised interaction stage on top of `det`'s backbone maps.
pub fn init_interaction(cfg: &InteractionConfig, det: &DetectionModel, seed: u64) -> Result<InteractionModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(INTERACTION_INIT_OFFSET));
    InteractionModel::new(cfg.clone(), det.backbone.out_channels, &mut rng)
}

/// GT-jitter proposals for every frame; deterministic in `(seed, snippet id)`.
pub fn snippet_proposals(cfg: &DetectionConfig, s: &AnnotatedSnippet, seed: u64) -> Vec<Vec<BoundingBox>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s.id);
    (0..s.frames.len())
        .map(|f| propose(&s.gt_boxes(f), &cfg.jitter, cfg.num_proposals, s.width as f64, s.height as f64, &mut rng).boxes)
        .collect()
}

/// Frozen first-stage results for one snippet.
#[derive(Clone, Debug)]
pub struct Stage1Output {
    pub maps: Vec<Tensor>,
    pub detections: Vec<Vec<Detection>>,
    pub stride: f64,
}

pub fn run_stage1(det: &DetectionModel, s: &AnnotatedSnippet, seed: u64) -> Result<Stage1Output> {
    let proposals = snippet_proposals(&det.cfg, s, seed);
    let maps = det.feature_map_values(&s.frames)?;
    let detections = det.detect_from_maps(&maps, &proposals, s.width, s.height)?;
    Ok(Stage1Output {
        maps,
        detections,
        stride: det.effective_stride(s.height),
    })
}

/// Quintuples for the key frame of a snippet.
pub fn run_stage2(int: &InteractionModel, s: &AnnotatedSnippet, st1: &Stage1Output, prior: &PriorTable) -> Result<Vec<Quintuple>> {
    let mut g = Graph::new();
    let maps: Vec<Var> = st1.maps.iter().map(|m| g.constant(m.clone())).collect();
    let inp = NodeInputs {
        maps: &maps,
        detections: &st1.detections,
        frame_w: s.width as f64,
        frame_h: s.height as f64,
        stride: st1.stride,
    };
    int.predict(&mut g, &inp, prior)
}

/// Key-frame instances and quintuples of a snippet set.
pub fn key_frame_ground_truth(snippets: &[AnnotatedSnippet]) -> Annotations {
    let mut a = Annotations::new();
    for s in snippets {
        let key = FrameKey::new(s.id, s.key_index() as u64);
        s.instances[s.key_index()].iter().for_each(|d| a.push_instance(key, d.clone()));
        s.quintuples.iter().for_each(|q| a.push_quintuple(key, q.clone()));
    }
    a
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Annotations,
    pub ground_truth: Annotations,
    pub it: MapReport,
    /// Absent when no second stage was run.
    pub iti: Option<MapReport>,
    /// Wall-clock inference time per key frame.
    pub seconds_per_key_frame: f64,
}

/// Runs both stages (the second when given) on every snippet and scores the
/// key frames.
pub fn evaluate(det: &DetectionModel, int: Option<(&InteractionModel, &PriorTable)>, snippets: &[AnnotatedSnippet], seed: u64) -> Result<Evaluation> {
    let mut preds = Annotations::new();
    let start = Instant::now();
    for s in snippets {
        let st1 = run_stage1(det, s, seed)?;
        let key = FrameKey::new(s.id, s.key_index() as u64);
        for d in &st1.detections[s.key_index()] {
            preds.push_instance(key, d.clone());
        }
        if let Some((m, prior)) = int {
            for q in run_stage2(m, s, &st1, prior)? {
                preds.push_quintuple(key, q);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64() / snippets.len().max(1) as f64;
    let gt = key_frame_ground_truth(snippets);
    Ok(Evaluation {
        it: map_it(&preds, &gt),
        iti: int.map(|_| map_iti(&preds, &gt)),
        predictions: preds,
        ground_truth: gt,
        seconds_per_key_frame: secs,
    })
}
