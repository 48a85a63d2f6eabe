use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{coin, InstrumentSpec, Occlusion, ScenarioConfig, SnippetLayout, TissueSpec};
use crate::error::Result;
use crate::geometry::BoundingBox;

/// Number of time steps (ending at the key frame) the oracle inspects.
pub const ORACLE_WINDOW: usize = 4;

pub const ACTION_NAMES: [&str; 5] = ["approach", "hold", "manipulate", "retract", "push"];

const FAR: f64 = -22.0;
const BAR_THICKNESS: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Approach,
    Hold,
    Manipulate,
    Retract,
    Push,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Approach, Action::Hold, Action::Manipulate, Action::Retract, Action::Push];

    pub fn index(self) -> usize {
        Action::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        ACTION_NAMES[self.index()]
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tip penetration depth (pixels past the tissue box edge) as a function of
/// the time step `tau <= 0`, where `tau = 0` is the key frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionScript {
    pub kind: Action,
    pub d0: f64,
    pub speed: f64,
    /// Secondary depth: contact depth for retract/push, retreat depth for manipulate.
    pub aux: f64,
    pub phase: f64,
}

impl MotionScript {
    pub fn sample(kind: Action, rng: &mut impl Rng) -> Self {
        let (d0, speed, aux) = match kind {
            Action::Approach => (rng.gen_range(4.0..8.0), rng.gen_range(6.0..9.5), 0.0),
            Action::Hold => (rng.gen_range(4.0..8.0), 0.0, 0.0),
            Action::Manipulate => (rng.gen_range(4.0..8.0), 0.0, rng.gen_range(6.5..9.0)),
            Action::Retract => (rng.gen_range(-16.0..-10.0), rng.gen_range(8.0..11.0), rng.gen_range(4.0..8.0)),
            Action::Push => (rng.gen_range(15.0..19.0), rng.gen_range(4.0..6.0), rng.gen_range(3.0..7.0)),
        };
        Self {
            kind,
            d0,
            speed,
            aux,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    pub fn depth(&self, tau: i64) -> f64 {
        let t = tau as f64;
        match self.kind {
            Action::Approach => (self.d0 + self.speed * t).max(FAR),
            Action::Hold => self.d0 + 0.8 * (1.7 * t + self.phase).sin(),
            Action::Manipulate => {
                if tau.rem_euclid(2) == 0 {
                    self.d0
                } else {
                    -self.aux
                }
            }
            Action::Retract => (self.d0 - self.speed * t).min(self.aux),
            Action::Push => (self.d0 + self.speed * t).max(self.aux),
        }
    }

    /// Depths over the oracle window, oldest first.
    pub fn window(&self) -> [f64; ORACLE_WINDOW] {
        let mut out = [0.0; ORACLE_WINDOW];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.depth(k as i64 - (ORACLE_WINDOW as i64 - 1));
        }
        out
    }
}

/// Rule oracle: the action implied by four depths (oldest first), if any.
pub fn classify_motion(d: &[f64; ORACLE_WINDOW]) -> Option<Action> {
    let first = d[0];
    let last = d[ORACLE_WINDOW - 1];
    let sign_changes = d.windows(2).filter(|w| (w[0] > 0.0) != (w[1] > 0.0)).count();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if last >= 12.0 && last - first >= 6.0 {
        Some(Action::Push)
    } else if last <= -8.0 && first > 0.0 {
        Some(Action::Retract)
    } else if last > 0.0 && sign_changes >= 2 {
        Some(Action::Manipulate)
    } else if lo >= 2.0 && hi <= 10.0 && hi - lo <= 3.0 {
        Some(Action::Hold)
    } else if last > 0.0 && first <= -4.0 && d.windows(2).all(|w| w[1] >= w[0]) {
        Some(Action::Approach)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Left,
    Right,
    Top,
    Bottom,
}

/// Tip point of an instrument whose tip sits `depth` past the given edge.
fn tip_point(tissue: &BoundingBox, side: Side, depth: f64, offset: f64) -> (f64, f64) {
    let (cx, cy) = tissue.center();
    match side {
        Side::Left => (tissue.x1 + depth, cy + offset),
        Side::Right => (tissue.x2 - depth, cy + offset),
        Side::Top => (cx + offset, tissue.y1 + depth),
        Side::Bottom => (cx + offset, tissue.y2 - depth),
    }
}

/// Bar box for an instrument whose tip sits `depth` past the given edge.
fn bar_box(tissue: &BoundingBox, side: Side, depth: f64, offset: f64, len: f64) -> BoundingBox {
    let (cx, cy) = tissue.center();
    let half = BAR_THICKNESS / 2.0;
    match side {
        Side::Left => {
            let tip = tissue.x1 + depth;
            BoundingBox::new(tip - len, cy + offset - half, tip, cy + offset + half)
        }
        Side::Right => {
            let tip = tissue.x2 - depth;
            BoundingBox::new(tip, cy + offset - half, tip + len, cy + offset + half)
        }
        Side::Top => {
            let tip = tissue.y1 + depth;
            BoundingBox::new(cx + offset - half, tip - len, cx + offset + half, tip)
        }
        Side::Bottom => {
            let tip = tissue.y2 - depth;
            BoundingBox::new(cx + offset - half, tip, cx + offset + half, tip + len)
        }
    }
}

/// Signed separation between two boxes (negative when they overlap).
fn gap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.x1 - b.x2).max(b.x1 - a.x2).max(a.y1 - b.y2).max(b.y1 - a.y2)
}

fn inside(b: &BoundingBox, w: f64, h: f64) -> bool {
    b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w && b.y2 <= h
}

fn sample_action(cfg: &ScenarioConfig, combos: &[(usize, usize, usize)], ins: usize, tis: usize, rng: &mut impl Rng) -> Option<usize> {
    let allowed: Vec<usize> = combos
        .iter()
        .filter(|c| c.0 == ins && c.1 == tis)
        .map(|c| c.2)
        .collect();
    let total: f64 = allowed.iter().map(|&a| cfg.action_weights[a]).sum();
    if allowed.is_empty() || total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    for &a in &allowed {
        u -= cfg.action_weights[a];
        if u < 0.0 {
            return Some(a);
        }
    }
    allowed.last().copied()
}

struct Attempt<'a> {
    cfg: &'a ScenarioConfig,
    w: f64,
    h: f64,
    /// Time steps covered: rendered frames and the oracle window.
    span: i64,
}

impl Attempt<'_> {
    fn taus(&self) -> std::ops::RangeInclusive<i64> {
        -self.span..=0
    }

    fn tissues(&self, rng: &mut impl Rng) -> Option<Vec<TissueSpec>> {
        let n = 1 + coin(rng, self.cfg.second_tissue_prob) as usize;
        let mut out: Vec<TissueSpec> = Vec::new();
        for _ in 0..n {
            let rx = rng.gen_range(12.0..18.0);
            let ry = rng.gen_range(10.0..14.0);
            let cx = rng.gen_range(rx + 4.0..self.w - rx - 4.0);
            let cy = rng.gen_range(ry + 4.0..self.h - ry - 4.0);
            let bbox = BoundingBox::new(cx - rx, cy - ry, cx + rx, cy + ry);
            if out.iter().any(|t| gap(&t.bbox, &bbox) < 10.0) {
                return None;
            }
            out.push(TissueSpec {
                category: rng.gen_range(0..self.cfg.num_tissues),
                bbox,
            });
        }
        Some(out)
    }

    /// Boxes per rendered frame (oldest first) for an interacting instrument.
    #[allow(clippy::type_complexity)]
    fn interacting(
        &self,
        tissues: &[TissueSpec],
        target: usize,
        script: &MotionScript,
        rng: &mut impl Rng,
    ) -> Option<(Vec<BoundingBox>, Vec<Option<(f64, f64)>>)> {
        let tb = tissues[target].bbox;
        let len = rng.gen_range(18.0..26.0);
        let mut sides = vec![Side::Left, Side::Right, Side::Top, Side::Bottom];
        sides.shuffle(rng);
        for side in sides {
            let extent = match side {
                Side::Left | Side::Right => tb.height(),
                Side::Top | Side::Bottom => tb.width(),
            };
            let offset = rng.gen_range(-0.3..0.3) * extent;
            let all: Vec<BoundingBox> = self
                .taus()
                .map(|tau| bar_box(&tb, side, script.depth(tau), offset, len))
                .collect();
            let ok = all.iter().all(|b| {
                inside(b, self.w, self.h)
                    && tissues
                        .iter()
                        .enumerate()
                        .all(|(k, t)| k == target || gap(b, &t.bbox) >= 6.0)
            });
            if ok {
                let contacts = self
                    .taus()
                    .map(|tau| {
                        let d = script.depth(tau);
                        (d > 0.0).then(|| tip_point(&tb, side, d, offset))
                    })
                    .collect();
                return Some((self.rendered(all), self.rendered(contacts)));
            }
        }
        None
    }

    fn idle(&self, tissues: &[TissueSpec], rng: &mut impl Rng) -> Option<Vec<BoundingBox>> {
        for _ in 0..30 {
            let len = rng.gen_range(18.0..26.0);
            let (bw, bh) = if coin(rng, 0.5) { (len, BAR_THICKNESS) } else { (BAR_THICKNESS, len) };
            let x = rng.gen_range(0.0..self.w - bw);
            let y = rng.gen_range(0.0..self.h - bh);
            let vx = rng.gen_range(-2.0..2.0);
            let vy = rng.gen_range(-2.0..2.0);
            let all: Vec<BoundingBox> = self
                .taus()
                .map(|tau| {
                    let t = tau as f64;
                    BoundingBox::new(x + vx * t, y + vy * t, x + vx * t + bw, y + vy * t + bh)
                })
                .collect();
            if all
                .iter()
                .all(|b| inside(b, self.w, self.h) && tissues.iter().all(|t| gap(b, &t.bbox) >= 12.0))
            {
                return Some(self.rendered(all));
            }
        }
        None
    }

    /// Keeps only the rendered frames (the last `r + 1` steps).
    fn rendered<T>(&self, all: Vec<T>) -> Vec<T> {
        let skip = all.len() - (self.cfg.r + 1);
        all.into_iter().skip(skip).collect()
    }
}

/// Share of occlusion events that target an instrument when one exists.
const INSTRUMENT_OCCLUSION_SHARE: f64 = 0.7;
/// Share of occlusion events whose frames end at the key frame.
const KEY_FRAME_OCCLUSION_SHARE: f64 = 0.5;

fn occlusions(cfg: &ScenarioConfig, tissues: &[TissueSpec], instruments: &[InstrumentSpec], rng: &mut impl Rng) -> Vec<Occlusion> {
    if !coin(rng, cfg.occlusion_prob) {
        return Vec::new();
    }
    let frames = cfg.r + 1;
    let count = if frames >= 2 { rng.gen_range(1..=2) } else { 1 };
    let start = if coin(rng, KEY_FRAME_OCCLUSION_SHARE) {
        frames - count
    } else {
        rng.gen_range(0..=frames - count)
    };
    let on_instrument = !instruments.is_empty() && coin(rng, INSTRUMENT_OCCLUSION_SHARE);
    let which = if on_instrument {
        rng.gen_range(0..instruments.len())
    } else {
        rng.gen_range(0..tissues.len())
    };
    let frac: f64 = rng.gen_range(0.3..0.5);
    let vertical_cut = coin(rng, 0.5);
    let from_start = coin(rng, 0.5);
    (start..start + count)
        .map(|f| {
            let rect = if on_instrument {
                // Centred across the bar, hiding its middle band.
                let b = instruments[which].boxes[f];
                let (cx, cy) = b.center();
                let frac = frac.max(0.45);
                if b.width() >= b.height() {
                    BoundingBox::new(cx - frac * b.width() / 2.0, b.y1, cx + frac * b.width() / 2.0, b.y2)
                } else {
                    BoundingBox::new(b.x1, cy - frac * b.height() / 2.0, b.x2, cy + frac * b.height() / 2.0)
                }
            } else {
                let b = tissues[which].bbox;
                match (vertical_cut, from_start) {
                    (true, true) => BoundingBox::new(b.x1, b.y1, b.x1 + frac * b.width(), b.y2),
                    (true, false) => BoundingBox::new(b.x2 - frac * b.width(), b.y1, b.x2, b.y2),
                    (false, true) => BoundingBox::new(b.x1, b.y1, b.x2, b.y1 + frac * b.height()),
                    (false, false) => BoundingBox::new(b.x1, b.y2 - frac * b.height(), b.x2, b.y2),
                }
            };
            Occlusion { frame: f, rect }
        })
        .collect()
}

pub(super) fn sample_layout(cfg: &ScenarioConfig, id: u64, rng: &mut impl Rng) -> Result<SnippetLayout> {
    let combos = cfg.combinations();
    let interaction = !coin(rng, cfg.non_interaction_rate);
    let attempt = Attempt {
        cfg,
        w: cfg.width as f64,
        h: cfg.height as f64,
        span: cfg.r.max(ORACLE_WINDOW - 1) as i64,
    };
    'outer: for _ in 0..200 {
        let Some(tissues) = attempt.tissues(rng) else { continue };
        let n_ins = 1 + coin(rng, cfg.second_instrument_prob) as usize;
        let mut instruments: Vec<InstrumentSpec> = Vec::new();
        let mut free: Vec<usize> = (0..tissues.len()).collect();
        for k in 0..n_ins {
            let category = rng.gen_range(0..cfg.num_instruments);
            let wants = interaction && !free.is_empty() && (k == 0 || coin(rng, 0.5));
            let spec = if wants {
                let target = free.remove(rng.gen_range(0..free.len()));
                let Some(a) = sample_action(cfg, &combos, category, tissues[target].category, rng) else {
                    continue 'outer;
                };
                let script = MotionScript::sample(Action::ALL[a], rng);
                let label = classify_motion(&script.window()).map(Action::index);
                debug_assert_eq!(label, Some(a));
                let Some((boxes, contacts)) = attempt.interacting(&tissues, target, &script, rng) else {
                    continue 'outer;
                };
                InstrumentSpec {
                    category,
                    boxes,
                    contacts,
                    target: Some((target, script)),
                    action: label,
                }
            } else {
                let Some(boxes) = attempt.idle(&tissues, rng) else { continue 'outer };
                InstrumentSpec {
                    category,
                    contacts: vec![None; boxes.len()],
                    boxes,
                    target: None,
                    action: None,
                }
            };
            let clash = instruments
                .iter()
                .any(|o| o.boxes.iter().zip(&spec.boxes).any(|(a, b)| gap(a, b) < 2.0));
            if clash {
                continue 'outer;
            }
            instruments.push(spec);
        }
        let occlusions = occlusions(cfg, &tissues, &instruments, rng);
        return Ok(SnippetLayout {
            id,
            tissues,
            instruments,
            occlusions,
            clamped: false,
        });
    }
    Ok(fallback(cfg, id, interaction, &combos, rng))
}

/// Single centred tissue with one instrument, clamped into the frame.
fn fallback(cfg: &ScenarioConfig, id: u64, interaction: bool, combos: &[(usize, usize, usize)], rng: &mut impl Rng) -> SnippetLayout {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (ti, tt, ta) = combos[rng.gen_range(0..combos.len())];
    let tissue = TissueSpec {
        category: tt,
        bbox: BoundingBox::from_center(w / 2.0, h / 2.0, 28.0, 22.0),
    };
    let script = MotionScript::sample(Action::ALL[ta], rng);
    let taus = -(cfg.r as i64)..=0;
    let boxes: Vec<BoundingBox> = taus
        .clone()
        .map(|tau| {
            let b = bar_box(&tissue.bbox, Side::Left, script.depth(tau), 0.0, 20.0);
            b.translate((-b.x1).max(0.0), 0.0)
        })
        .collect();
    let contacts = taus
        .zip(&boxes)
        .map(|(tau, b)| (interaction && script.depth(tau) > 0.0).then(|| (b.x2, b.center().1)))
        .collect();
    let action = if interaction { classify_motion(&script.window()).map(Action::index) } else { None };
    SnippetLayout {
        id,
        tissues: vec![tissue],
        instruments: vec![InstrumentSpec {
            category: ti,
            boxes,
            contacts,
            target: interaction.then_some((0, script)),
            action,
        }],
        occlusions: Vec::new(),
        clamped: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn every_script_is_recognised_by_the_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in Action::ALL {
            for _ in 0..2000 {
                let s = MotionScript::sample(kind, &mut rng);
                assert_eq!(classify_motion(&s.window()), Some(kind), "{s:?} {:?}", s.window());
            }
        }
    }

    #[test]
    fn oracle_hand_cases() {
        assert_eq!(classify_motion(&[-20.0, -12.0, -4.0, 5.0]), Some(Action::Approach));
        assert_eq!(classify_motion(&[5.0, 6.0, 5.5, 6.0]), Some(Action::Hold));
        assert_eq!(classify_motion(&[-7.0, 6.0, -7.0, 6.0]), Some(Action::Manipulate));
        assert_eq!(classify_motion(&[6.0, 6.0, -2.0, -12.0]), Some(Action::Retract));
        assert_eq!(classify_motion(&[5.0, 5.0, 10.0, 16.0]), Some(Action::Push));
        assert_eq!(classify_motion(&[-22.0, -22.0, -22.0, -22.0]), None);
        assert_eq!(classify_motion(&[6.0, -2.0, -5.0, -6.0]), None);
    }

    #[test]
    fn approach_hold_manipulate_agree_at_the_key_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [Action::Approach, Action::Hold, Action::Manipulate] {
            let s = MotionScript::sample(kind, &mut rng);
            let d = s.depth(0);
            assert!((3.0..=9.0).contains(&d), "{kind}: {d}");
        }
    }

    #[test]
    fn gap_sign() {
        let a = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(gap(&a, &BoundingBox::new(15.0, 0.0, 20.0, 10.0)), 5.0);
        assert!(gap(&a, &BoundingBox::new(5.0, 5.0, 20.0, 20.0)) < 0.0);
    }
}
