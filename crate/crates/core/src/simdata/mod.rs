//! Deterministic synthetic surgical snippets.
//!
//! Tissues are static elliptical blobs; instruments are bars whose tip moves
//! relative to a tissue's box edge. The action of an instrument-tissue pair
//! is a function of the tip's penetration depth over the last four time
//! steps, decided by [`classify_motion`]. Approach, hold and manipulate all
//! end with the same shallow contact at the key frame, so they can only be
//! told apart from the reference frames.

mod annotations;
mod render;
mod scripts;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numeric::Tensor;
use crate::types::{Detection, Quintuple, Role};

pub use annotations::{read_annotations, write_annotations, Annotations, FrameAnnotation};
pub use render::{load_frame_png, save_frame_png};
pub use scripts::{classify_motion, Action, MotionScript, ACTION_NAMES, ORACLE_WINDOW};

/// Scenario parameters for the generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    /// Number of reference frames preceding the key frame.
    pub r: usize,
    pub num_instruments: usize,
    pub num_tissues: usize,
    pub num_actions: usize,
    pub noise_std: f64,
    pub occlusion_prob: f64,
    pub non_interaction_rate: f64,
    pub second_tissue_prob: f64,
    pub second_instrument_prob: f64,
    /// Relative frequency of each action class.
    pub action_weights: Vec<f64>,
    /// Explicit (instrument, tissue, action) combinations; derived when empty.
    pub combos: Vec<(usize, usize, usize)>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            r: 3,
            num_instruments: 4,
            num_tissues: 4,
            num_actions: 5,
            noise_std: 0.03,
            occlusion_prob: 0.5,
            non_interaction_rate: 0.1,
            second_tissue_prob: 0.4,
            second_instrument_prob: 0.35,
            action_weights: vec![0.30, 0.25, 0.20, 0.15, 0.05],
            combos: Vec::new(),
            seed: 7,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_instruments == 0 || self.num_tissues == 0 || self.num_actions == 0 {
            return bad("category counts must be at least 1".into());
        }
        if self.num_actions > Action::ALL.len() {
            return bad(format!("at most {} action scripts exist", Action::ALL.len()));
        }
        if self.action_weights.len() != self.num_actions || self.action_weights.iter().any(|&w| w.is_nan() || w < 0.0) {
            return bad("action_weights needs one non-negative weight per action".into());
        }
        if self.width < 64 || self.height < 48 {
            return bad(format!("frame {}x{} too small (min 64x48)", self.width, self.height));
        }
        for p in [self.occlusion_prob, self.non_interaction_rate, self.second_tissue_prob, self.second_instrument_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        for &(i, t, a) in &self.combos {
            if i >= self.num_instruments || t >= self.num_tissues || a >= self.num_actions {
                return bad(format!("combo ({i}, {t}, {a}) out of range"));
            }
        }
        Ok(())
    }

    /// Every admissible (instrument, tissue, action) combination.
    pub fn combinations(&self) -> Vec<(usize, usize, usize)> {
        if !self.combos.is_empty() {
            let set: BTreeSet<_> = self.combos.iter().copied().collect();
            return set.into_iter().collect();
        }
        // Odd instruments never retract, odd tissues are never pushed into.
        let mut out = Vec::new();
        for i in 0..self.num_instruments {
            for t in 0..self.num_tissues {
                for a in 0..self.num_actions {
                    let action = Action::ALL[a];
                    if (action == Action::Retract && i % 2 == 1) || (action == Action::Push && t % 2 == 1) {
                        continue;
                    }
                    out.push((i, t, a));
                }
            }
        }
        out
    }

    pub fn frame_count(&self) -> usize {
        self.r + 1
    }

    /// Per-snippet RNG seed.
    pub fn snippet_seed(&self, id: u64, stream: u64) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(id.to_le_bytes());
        h.update(stream.to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().unwrap())
    }
}

/// Dataset split assigned by hashing the snippet id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn of(id: u64) -> Split {
        let mut h = Sha256::new();
        h.update(b"split");
        h.update(id.to_le_bytes());
        match h.finalize()[0] % 10 {
            0..=6 => Split::Train,
            7 => Split::Val,
            _ => Split::Test,
        }
    }

    /// The first `count` snippet ids belonging to this split.
    pub fn ids(self, count: usize) -> Vec<u64> {
        (0u64..).filter(|&id| Split::of(id) == self).take(count).collect()
    }
}

/// One placed tissue.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueSpec {
    pub category: usize,
    pub bbox: BoundingBox,
}

/// One instrument and its trajectory over the rendered frames.
#[derive(Clone, Debug, PartialEq)]
pub struct InstrumentSpec {
    pub category: usize,
    /// Per rendered frame, oldest first.
    pub boxes: Vec<BoundingBox>,
    /// Tip position per rendered frame while touching the target tissue.
    pub contacts: Vec<Option<(f64, f64)>>,
    /// Index into the tissue list and the scripted motion, if interacting.
    pub target: Option<(usize, MotionScript)>,
    /// Action decided by the rule oracle from the motion script.
    pub action: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occlusion {
    pub frame: usize,
    pub rect: BoundingBox,
}

/// Geometry and labels of a snippet before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetLayout {
    pub id: u64,
    pub tissues: Vec<TissueSpec>,
    pub instruments: Vec<InstrumentSpec>,
    pub occlusions: Vec<Occlusion>,
    /// Some trajectory had to be clamped to stay inside the frame.
    pub clamped: bool,
}

impl SnippetLayout {
    pub fn is_interaction(&self) -> bool {
        self.instruments.iter().any(|i| i.action.is_some())
    }
}

/// Rendered frames with per-frame ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSnippet {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// `[3, H, W]` images in `[0, 1]`, oldest first; the last is the key frame.
    pub frames: Vec<Tensor>,
    pub instances: Vec<Vec<Detection>>,
    pub quintuples: Vec<Quintuple>,
}

impl AnnotatedSnippet {
    pub fn key_index(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn r(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn gt_boxes(&self, frame: usize) -> Vec<BoundingBox> {
        self.instances[frame].iter().map(|d| d.bbox).collect()
    }

    /// Keeps the key frame and the `r` frames before it, reindexed from 0.
    pub fn last_frames(self, r: usize) -> Result<Self> {
        if r > self.r() {
            return Err(Error::Config(format!("snippet {} holds {} reference frames, {r} requested", self.id, self.r())));
        }
        let skip = self.r() - r;
        Ok(Self {
            frames: self.frames[skip..].to_vec(),
            instances: self.instances[skip..]
                .iter()
                .enumerate()
                .map(|(f, v)| v.iter().map(|d| d.clone().with_frame(f)).collect())
                .collect(),
            ..self
        })
    }
}

/// Samples a snippet's scene and scripts (no pixels).
pub fn sample_layout(cfg: &ScenarioConfig, id: u64) -> Result<SnippetLayout> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.snippet_seed(id, 0));
    scripts::sample_layout(cfg, id, &mut rng)
}

/// Generates one annotated snippet; deterministic in `(cfg.seed, id)`.
pub fn generate_snippet(cfg: &ScenarioConfig, id: u64) -> Result<AnnotatedSnippet> {
    let layout = sample_layout(cfg, id)?;
    if layout.clamped {
        log::warn!("snippet {id}: trajectory clamped to stay inside the frame");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.snippet_seed(id, 1));
    let frames = (0..cfg.frame_count())
        .map(|f| render::render_frame(cfg, &layout, f, &mut rng))
        .collect();
    let key = cfg.r;
    let instances = (0..cfg.frame_count())
        .map(|f| {
            let mut v: Vec<Detection> = layout
                .instruments
                .iter()
                .map(|i| Detection::new(Role::Instrument, i.category, i.boxes[f], 1.0).with_frame(f))
                .collect();
            v.extend(
                layout
                    .tissues
                    .iter()
                    .map(|t| Detection::new(Role::Tissue, t.category, t.bbox, 1.0).with_frame(f)),
            );
            v
        })
        .collect();
    let quintuples = layout
        .instruments
        .iter()
        .filter_map(|ins| {
            let (t, _) = ins.target.as_ref()?;
            let action = ins.action?;
            let tissue = &layout.tissues[*t];
            Some(Quintuple {
                instrument: ins.category,
                instrument_box: ins.boxes[key],
                tissue: tissue.category,
                tissue_box: tissue.bbox,
                action,
                score: 1.0,
            })
        })
        .collect();
    Ok(AnnotatedSnippet {
        id,
        width: cfg.width,
        height: cfg.height,
        frames,
        instances,
        quintuples,
    })
}

pub fn generate_split(cfg: &ScenarioConfig, split: Split, count: usize) -> Result<Vec<AnnotatedSnippet>> {
    split.ids(count).into_iter().map(|id| generate_snippet(cfg, id)).collect()
}

/// Admissible action sets per instrument and tissue category.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PriorTable {
    pub instruments: Vec<BTreeSet<usize>>,
    pub tissues: Vec<BTreeSet<usize>>,
    pub num_actions: usize,
}

impl PriorTable {
    /// Actions admissible for the pair; a category missing from the table
    /// admits every action.
    pub fn admissible(&self, instrument: usize, tissue: usize) -> Vec<bool> {
        let all: BTreeSet<usize> = (0..self.num_actions).collect();
        let ins = self.instruments.get(instrument).unwrap_or_else(|| {
            log::warn!("instrument category {instrument} missing from prior table");
            &all
        });
        let tis = self.tissues.get(tissue).unwrap_or_else(|| {
            log::warn!("tissue category {tissue} missing from prior table");
            &all
        });
        (0..self.num_actions).map(|a| ins.contains(&a) && tis.contains(&a)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# role category admissible_actions\n");
        for (role, sets) in [(Role::Instrument, &self.instruments), (Role::Tissue, &self.tissues)] {
            for (c, set) in sets.iter().enumerate() {
                let list = if set.is_empty() {
                    "-".to_string()
                } else {
                    set.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(",")
                };
                s.push_str(&format!("{role} {c} {list}\n"));
            }
        }
        s
    }

    pub fn parse(text: &str, num_actions: usize, path: &str) -> Result<Self> {
        let mut table = PriorTable {
            num_actions,
            ..Default::default()
        };
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_string(),
                line: ln + 1,
                msg,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [role, cat, list] = fields[..] else {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            };
            let role: Role = role.parse().map_err(err)?;
            let cat: usize = cat.parse().map_err(|_| err(format!("bad category `{cat}`")))?;
            let set: BTreeSet<usize> = if list == "-" {
                BTreeSet::new()
            } else {
                list.split(',')
                    .map(|a| match a.parse::<usize>() {
                        Ok(v) if v < num_actions => Ok(v),
                        _ => Err(err(format!("bad action id `{a}`"))),
                    })
                    .collect::<Result<_>>()?
            };
            let sets = match role {
                Role::Instrument => &mut table.instruments,
                Role::Tissue => &mut table.tissues,
            };
            if sets.len() <= cat {
                sets.resize(cat + 1, BTreeSet::new());
            }
            sets[cat] = set;
        }
        Ok(table)
    }
}

/// Per-category admissible sets covering exactly the scripted combinations.
pub fn build_prior_table(cfg: &ScenarioConfig) -> PriorTable {
    let mut table = PriorTable {
        instruments: vec![BTreeSet::new(); cfg.num_instruments],
        tissues: vec![BTreeSet::new(); cfg.num_tissues],
        num_actions: cfg.num_actions,
    };
    for (i, t, a) in cfg.combinations() {
        table.instruments[i].insert(a);
        table.tissues[t].insert(a);
    }
    table
}

/// Picks `true` with probability `p`.
pub(crate) fn coin(rng: &mut impl Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

#[cfg(test)]
mod tests;
