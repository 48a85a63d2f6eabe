//! Ground-truth-jitter proposal provider.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoundingBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterConfig {
    /// Maximum centre shift as a fraction of the box size.
    pub center: f64,
    /// Log-uniform per-axis scale range.
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            center: 0.1,
            scale_min: 0.8,
            scale_max: 1.25,
        }
    }
}

impl JitterConfig {
    pub fn none() -> Self {
        Self {
            center: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub boxes: Vec<BoundingBox>,
    pub objectness: Vec<f64>,
    /// The provider could not produce enough distinct boxes and replicated some.
    pub degenerate: bool,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn jitter_box(b: &BoundingBox, j: &JitterConfig, rng: &mut impl Rng) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = b.center();
    let mut shift = |size: f64| if j.center > 0.0 { rng.gen_range(-j.center..=j.center) * size } else { 0.0 };
    let (dx, dy) = (shift(w), shift(h));
    let (lo, hi) = (j.scale_min.ln(), j.scale_max.ln());
    let mut scale = || if hi > lo { rng.gen_range(lo..=hi).exp() } else { lo.exp() };
    let (sw, sh) = (scale(), scale());
    BoundingBox::from_center(cx + dx, cy + dy, w * sw, h * sh)
}

fn background_box(gt: &[BoundingBox], frame_w: f64, frame_h: f64, rng: &mut impl Rng) -> Option<BoundingBox> {
    let (max_w, max_h) = ((frame_w / 3.0).max(8.0), (frame_h / 3.0).max(6.0));
    if frame_w < 8.0 || frame_h < 6.0 {
        return None;
    }
    let mut last = None;
    for _ in 0..20 {
        let w = rng.gen_range(8.0..=max_w.min(frame_w));
        let h = rng.gen_range(6.0..=max_h.min(frame_h));
        let x = rng.gen_range(0.0..=frame_w - w);
        let y = rng.gen_range(0.0..=frame_h - h);
        let b = BoundingBox::new(x, y, x + w, y + h);
        if gt.iter().all(|g| iou(g, &b) < 0.3) {
            return Some(b);
        }
        last = Some(b);
    }
    last
}

/// Exactly `n` proposals: one jitter per GT box, further jitters until half
/// the set is foreground, then background boxes.
pub fn propose(
    gt: &[BoundingBox],
    jitter: &JitterConfig,
    n: usize,
    frame_w: f64,
    frame_h: f64,
    rng: &mut impl Rng,
) -> ProposalSet {
    let mut boxes = Vec::with_capacity(n);
    let mut objectness = Vec::with_capacity(n);
    let fg_target = if gt.is_empty() { 0 } else { gt.len().max(n / 2).min(n) };
    let mut k = 0;
    while boxes.len() < fg_target {
        let b = jitter_box(&gt[k % gt.len()], jitter, rng).clip(frame_w, frame_h);
        boxes.push(b);
        objectness.push(1.0);
        k += 1;
    }
    let mut degenerate = false;
    while boxes.len() < n {
        match background_box(gt, frame_w, frame_h, rng) {
            Some(b) => {
                boxes.push(b);
                objectness.push(0.0);
            }
            None => {
                degenerate = true;
                break;
            }
        }
    }
    if boxes.len() < n {
        if boxes.is_empty() {
            boxes.push(BoundingBox::new(0.0, 0.0, frame_w, frame_h));
            objectness.push(0.0);
        }
        let have = boxes.len();
        for i in 0..n - have {
            boxes.push(boxes[i % have]);
            objectness.push(objectness[i % have]);
        }
        log::warn!("proposal set padded by replication to {n}");
    }
    ProposalSet {
        boxes,
        objectness,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gt() -> Vec<BoundingBox> {
        vec![BoundingBox::new(10.0, 10.0, 40.0, 30.0), BoundingBox::new(60.0, 50.0, 90.0, 80.0)]
    }

    #[test]
    fn zero_jitter_keeps_gt_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = propose(&gt(), &JitterConfig::none(), 16, 128.0, 96.0, &mut rng);
        assert_eq!(&p.boxes[..2], &gt()[..]);
        assert_eq!(p.len(), 16);
        assert!(!p.degenerate);
    }

    #[test]
    fn size_is_always_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 3, 16, 40] {
            assert_eq!(propose(&gt(), &JitterConfig::default(), n, 128.0, 96.0, &mut rng).len(), n);
            assert_eq!(propose(&[], &JitterConfig::default(), n, 128.0, 96.0, &mut rng).len(), n);
        }
        let tiny = propose(&[], &JitterConfig::default(), 4, 5.0, 5.0, &mut rng);
        assert_eq!(tiny.len(), 4);
        assert!(tiny.degenerate);
    }

    #[test]
    fn no_gt_gives_background_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = propose(&[], &JitterConfig::default(), 8, 128.0, 96.0, &mut rng);
        assert!(p.objectness.iter().all(|&o| o == 0.0));
    }

    #[test]
    fn jitters_keep_iou_above_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = JitterConfig::default();
        let mut min = f64::INFINITY;
        for i in 0..10_000 {
            let w = 5.0 + (i % 40) as f64;
            let b = BoundingBox::new(20.0, 30.0, 20.0 + w, 30.0 + 0.7 * w + 3.0);
            min = min.min(iou(&b, &jitter_box(&b, &j, &mut rng)));
        }
        assert!(min > 0.5, "min IoU {min}");
    }

    #[test]
    fn deterministic_under_seed() {
        let a = propose(&gt(), &JitterConfig::default(), 12, 128.0, 96.0, &mut ChaCha8Rng::seed_from_u64(9));
        let b = propose(&gt(), &JitterConfig::default(), 12, 128.0, 96.0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
