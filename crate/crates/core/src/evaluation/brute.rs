//! Slow reference matcher: flat lists, no grouping, quadratic AP.

use crate::geometry::{iou, BoundingBox};
use crate::simdata::Annotations;
use crate::types::FrameKey;

struct Item {
    class: (u8, usize, usize, usize),
    frame: FrameKey,
    score: f64,
    boxes: Vec<BoundingBox>,
}

fn ap_by_definition(hits: &[bool], num_gt: usize) -> f64 {
    let n = hits.len();
    let precision = |k: usize| hits[..=k].iter().filter(|h| **h).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in (0..n).filter(|&k| hits[k]) {
        // Recall rises by 1/num_gt at every hit.
        let best = (k..n).map(precision).fold(0.0, f64::max);
        ap += best;
    }
    ap / num_gt as f64
}

fn brute_map(preds: Vec<Item>, gts: Vec<Item>) -> Option<f64> {
    let mut preds = preds;
    // Stable: equal scores keep input order.
    preds.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    let mut classes: Vec<_> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &c in &classes {
        let mut used = vec![false; gts.len()];
        let mut hits = Vec::new();
        for p in preds.iter().filter(|p| p.class == c) {
            let mut best = None;
            let mut best_o = 0.0;
            for (j, g) in gts.iter().enumerate() {
                if g.class != c || g.frame != p.frame || used[j] {
                    continue;
                }
                let o = p.boxes.iter().zip(&g.boxes).map(|(a, b)| iou(a, b)).fold(f64::INFINITY, f64::min);
                if o > 0.5 && o > best_o {
                    best = Some(j);
                    best_o = o;
                }
            }
            if let Some(j) = best {
                used[j] = true;
            }
            hits.push(best.is_some());
        }
        let num_gt = gts.iter().filter(|g| g.class == c).count();
        total += ap_by_definition(&hits, num_gt);
    }
    Some(total / classes.len() as f64)
}

fn instances(a: &Annotations, with_score: bool) -> Vec<Item> {
    let mut v = Vec::new();
    for (k, fa) in a.iter() {
        for d in &fa.instances {
            v.push(Item {
                class: (d.role as u8, d.category, 0, 0),
                frame: *k,
                score: if with_score { d.score } else { 1.0 },
                boxes: vec![d.bbox],
            });
        }
    }
    v
}

fn quintuples(a: &Annotations, with_score: bool) -> Vec<Item> {
    let mut v = Vec::new();
    for (k, fa) in a.iter() {
        for q in &fa.quintuples {
            v.push(Item {
                class: (2, q.instrument, q.tissue, q.action),
                frame: *k,
                score: if with_score { q.score } else { 1.0 },
                boxes: vec![q.instrument_box, q.tissue_box],
            });
        }
    }
    v
}

/// Reference value of the instance mAP.
pub fn brute_force_map_it(preds: &Annotations, gt: &Annotations) -> Option<f64> {
    brute_map(instances(preds, true), instances(gt, false))
}

/// Reference value of the interaction mAP.
pub fn brute_force_map_iti(preds: &Annotations, gt: &Annotations) -> Option<f64> {
    brute_map(quintuples(preds, true), quintuples(gt, false))
}
