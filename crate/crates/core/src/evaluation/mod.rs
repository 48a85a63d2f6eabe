//! Average precision for instance detection and interaction quintuples,
//! clip-wise scoring and the signed-rank comparison of paired clip scores.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::geometry::{iou, BoundingBox};
use crate::simdata::Annotations;
use crate::types::{FrameKey, Role};

mod brute;
pub use brute::{brute_force_map_it, brute_force_map_iti};

/// A prediction is a true positive only when its overlap is strictly above this.
pub const TP_IOU: f64 = 0.5;

/// Outcome of greedy matching for one class, predictions in processing order.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub scores: Vec<f64>,
    pub tp: Vec<bool>,
    /// Index into the class's GT list.
    pub matched: Vec<Option<usize>>,
    pub num_gt: usize,
}

impl MatchResult {
    /// All-point interpolated AP; `None` without ground truth.
    pub fn average_precision(&self) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        let mut tp = 0usize;
        let mut prec: Vec<f64> = self
            .tp
            .iter()
            .enumerate()
            .map(|(i, &hit)| {
                tp += hit as usize;
                tp as f64 / (i + 1) as f64
            })
            .collect();
        for i in (0..prec.len().saturating_sub(1)).rev() {
            prec[i] = prec[i].max(prec[i + 1]);
        }
        // Recall steps by 1/num_gt exactly at each hit.
        let mut area = 0.0;
        for (p, &hit) in prec.iter().zip(&self.tp) {
            if hit {
                area += p;
            }
        }
        Some(area / self.num_gt as f64)
    }
}

/// Greedy matching of scored predictions to GT items grouped by frame.
/// Predictions are visited by descending score (ties keep input order); each
/// takes the unmatched GT in its frame with the largest overlap above
/// [`TP_IOU`].
pub fn match_class<P, G>(preds: &[(FrameKey, f64, P)], gts: &[(FrameKey, G)], overlap: impl Fn(&P, &G) -> f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].1.total_cmp(&preds[a].1));
    let mut by_frame: BTreeMap<FrameKey, Vec<usize>> = BTreeMap::new();
    for (j, (k, _)) in gts.iter().enumerate() {
        by_frame.entry(*k).or_default().push(j);
    }
    let mut used = vec![false; gts.len()];
    let mut out = MatchResult {
        scores: Vec::with_capacity(preds.len()),
        tp: Vec::with_capacity(preds.len()),
        matched: Vec::with_capacity(preds.len()),
        num_gt: gts.len(),
    };
    for i in order {
        let (k, s, p) = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for &j in by_frame.get(k).map_or(&[][..], |v| &v[..]) {
            if used[j] {
                continue;
            }
            let o = overlap(p, &gts[j].1);
            if o > TP_IOU && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        out.scores.push(*s);
        out.tp.push(best.is_some());
        out.matched.push(best.map(|(j, _)| j));
    }
    out
}

/// AP of one class given as scored boxes and GT boxes.
pub fn ap_single_class(preds: &[(FrameKey, f64, BoundingBox)], gts: &[(FrameKey, BoundingBox)]) -> Option<f64> {
    match_class(preds, gts, iou).average_precision()
}

/// Class label used in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassKey {
    Instance(Role, usize),
    Interaction(usize, usize, usize),
}

impl fmt::Display for ClassKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassKey::Instance(r, c) => write!(f, "{r}:{c}"),
            ClassKey::Interaction(i, t, a) => write!(f, "i{i}-t{t}-a{a}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class: ClassKey,
    /// `None` when the class has no GT; such classes are left out of the mean.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_pred: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub classes: Vec<ClassAp>,
    /// Mean over classes with GT; `None` when there are none.
    pub map: Option<f64>,
}

impl MapReport {
    fn from_classes(classes: Vec<ClassAp>) -> Self {
        let aps: Vec<f64> = classes.iter().filter_map(|c| c.ap).collect();
        let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        Self { classes, map }
    }

    /// The mean, or 0 when undefined.
    pub fn value(&self) -> f64 {
        self.map.unwrap_or(0.0)
    }

    pub fn skipped(&self) -> impl Iterator<Item = &ClassAp> {
        self.classes.iter().filter(|c| c.ap.is_none())
    }
}

type Grouped<P, G> = BTreeMap<ClassKey, (Vec<(FrameKey, f64, P)>, Vec<(FrameKey, G)>)>;

fn report<P, G>(groups: Grouped<P, G>, overlap: impl Fn(&P, &G) -> f64) -> MapReport {
    let classes = groups
        .into_iter()
        .map(|(class, (p, g))| ClassAp {
            class,
            ap: match_class(&p, &g, &overlap).average_precision(),
            num_gt: g.len(),
            num_pred: p.len(),
        })
        .collect();
    MapReport::from_classes(classes)
}

/// Instance detection mAP over instrument and tissue categories.
pub fn map_it(preds: &Annotations, gt: &Annotations) -> MapReport {
    let mut groups: Grouped<BoundingBox, BoundingBox> = BTreeMap::new();
    for (k, fa) in preds.iter() {
        for d in &fa.instances {
            groups.entry(ClassKey::Instance(d.role, d.category)).or_default().0.push((*k, d.score, d.bbox));
        }
    }
    for (k, fa) in gt.iter() {
        for d in &fa.instances {
            groups.entry(ClassKey::Instance(d.role, d.category)).or_default().1.push((*k, d.bbox));
        }
    }
    report(groups, iou)
}

/// Interaction mAP: class triple must agree and both boxes must overlap.
pub fn map_iti(preds: &Annotations, gt: &Annotations) -> MapReport {
    let mut groups: Grouped<(BoundingBox, BoundingBox), (BoundingBox, BoundingBox)> = BTreeMap::new();
    for (k, fa) in preds.iter() {
        for q in &fa.quintuples {
            let (i, t, a) = q.class_key();
            groups
                .entry(ClassKey::Interaction(i, t, a))
                .or_default()
                .0
                .push((*k, q.score, (q.instrument_box, q.tissue_box)));
        }
    }
    for (k, fa) in gt.iter() {
        for q in &fa.quintuples {
            let (i, t, a) = q.class_key();
            groups
                .entry(ClassKey::Interaction(i, t, a))
                .or_default()
                .1
                .push((*k, (q.instrument_box, q.tissue_box)));
        }
    }
    report(groups, |p, g| iou(&p.0, &g.0).min(iou(&p.1, &g.1)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClipScore {
    pub video: u64,
    pub clip: u64,
    /// `None` when the clip has no GT interaction.
    pub map_iti: Option<f64>,
}

/// mAP_ITI per clip of `clip_len` consecutive frames of each video.
pub fn clipwise_scores(preds: &Annotations, gt: &Annotations, clip_len: u64) -> Vec<ClipScore> {
    assert!(clip_len > 0, "clip length must be positive");
    let clip_of = |k: &FrameKey| (k.video, k.frame / clip_len);
    let mut clips: BTreeMap<(u64, u64), (Annotations, Annotations)> = BTreeMap::new();
    for (k, fa) in gt.iter() {
        let e = clips.entry(clip_of(k)).or_default();
        fa.instances.iter().for_each(|d| e.1.push_instance(*k, d.clone()));
        fa.quintuples.iter().for_each(|q| e.1.push_quintuple(*k, q.clone()));
    }
    for (k, fa) in preds.iter() {
        let e = clips.entry(clip_of(k)).or_default();
        fa.quintuples.iter().for_each(|q| e.0.push_quintuple(*k, q.clone()));
    }
    clips
        .into_iter()
        .map(|((video, clip), (p, g))| {
            let map_iti = if g.num_quintuples() == 0 {
                log::info!("clip {clip} of video {video} has no GT interaction; skipped");
                None
            } else {
                map_iti(&p, &g).map
            };
            ClipScore { video, clip, map_iti }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum SignedRank {
    /// Every paired difference is zero.
    Degenerate { pairs: usize },
    Test {
        /// Non-zero differences.
        n: usize,
        w_plus: f64,
        w_minus: f64,
        /// min(W+, W-)
        statistic: f64,
        z: f64,
        /// Two-sided, normal approximation with tie correction.
        p_value: f64,
    },
}

/// Wilcoxon signed-rank test on paired scores `a[i] - b[i]`; zero
/// differences are dropped and tied magnitudes get average ranks.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> SignedRank {
    assert_eq!(a.len(), b.len(), "paired samples must have equal length");
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return SignedRank::Degenerate { pairs: a.len() };
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = d.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|r| *r = avg);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let nf = n as f64;
    let w_minus = nf * (nf + 1.0) / 2.0 - w_plus;
    let statistic = w_plus.min(w_minus);
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let (z, p_value) = if var > 0.0 {
        let z = (statistic - mean) / var.sqrt();
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        (z, (2.0 * std.cdf(-z.abs())).min(1.0))
    } else {
        (0.0, 1.0)
    };
    SignedRank::Test {
        n,
        w_plus,
        w_minus,
        statistic,
        z,
        p_value,
    }
}

fn fmt_ap(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Text report: one row per class then the summary line.
pub fn format_report(it: &MapReport, iti: &MapReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:<14} {:>8} {:>6} {:>6}", "metric", "class", "AP", "n_gt", "n_pred");
    for (name, r) in [("IT", it), ("ITI", iti)] {
        for c in &r.classes {
            let _ = writeln!(s, "{:<8} {:<14} {:>8} {:>6} {:>6}", name, c.class.to_string(), fmt_ap(c.ap), c.num_gt, c.num_pred);
        }
    }
    let _ = writeln!(s, "mAP_IT={}, mAP_ITI={}", fmt_ap(it.map), fmt_ap(iti.map));
    s
}

#[derive(Serialize)]
struct ClassRecord<'a> {
    metric: &'a str,
    class: String,
    ap: Option<f64>,
    num_gt: usize,
    num_pred: usize,
}

/// One JSON object per class and line.
pub fn format_json_lines(it: &MapReport, iti: &MapReport) -> String {
    let mut s = String::new();
    for (metric, r) in [("IT", it), ("ITI", iti)] {
        for c in &r.classes {
            let rec = ClassRecord {
                metric,
                class: c.class.to_string(),
                ap: c.ap,
                num_gt: c.num_gt,
                num_pred: c.num_pred,
            };
            s.push_str(&serde_json::to_string(&rec).expect("plain record serialises"));
            s.push('\n');
        }
    }
    s
}
