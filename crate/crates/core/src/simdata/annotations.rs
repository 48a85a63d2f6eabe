use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::AnnotatedSnippet;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::types::{Detection, FrameKey, Quintuple, Role};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameAnnotation {
    pub instances: Vec<Detection>,
    pub quintuples: Vec<Quintuple>,
}

/// Per-frame records keyed by (video, frame). Frames without records are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Annotations {
    frames: BTreeMap<FrameKey, FrameAnnotation>,
}

impl Annotations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snippets(snippets: &[AnnotatedSnippet]) -> Self {
        let mut out = Self::new();
        for s in snippets {
            for (f, inst) in s.instances.iter().enumerate() {
                for d in inst {
                    out.push_instance(FrameKey::new(s.id, f as u64), d.clone());
                }
            }
            let key = FrameKey::new(s.id, s.key_index() as u64);
            for q in &s.quintuples {
                out.push_quintuple(key, q.clone());
            }
        }
        out
    }

    pub fn push_instance(&mut self, key: FrameKey, mut d: Detection) {
        d.frame = key.frame as usize;
        self.frames.entry(key).or_default().instances.push(d);
    }

    pub fn push_quintuple(&mut self, key: FrameKey, q: Quintuple) {
        self.frames.entry(key).or_default().quintuples.push(q);
    }

    pub fn frame(&self, key: FrameKey) -> FrameAnnotation {
        self.frames.get(&key).cloned().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FrameKey, &FrameAnnotation)> {
        self.frames.iter()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_quintuples(&self) -> usize {
        self.frames.values().map(|f| f.quintuples.len()).sum()
    }

    /// Serialises to the line format. Scores other than 1 are appended as a
    /// trailing field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let bx = |b: &BoundingBox| format!("{} {} {} {}", b.x1, b.y1, b.x2, b.y2);
        let score = |v: f64| if v == 1.0 { String::new() } else { format!(" {v}") };
        for (k, fa) in &self.frames {
            for d in &fa.instances {
                let _ = writeln!(s, "{} {} {} {} {}{}", k.video, k.frame, d.role, d.category, bx(&d.bbox), score(d.score));
            }
            for q in &fa.quintuples {
                let _ = writeln!(
                    s,
                    "{} {} INT {} {} {} {} {}{}",
                    k.video,
                    k.frame,
                    q.instrument,
                    bx(&q.instrument_box),
                    q.tissue,
                    bx(&q.tissue_box),
                    q.action,
                    score(q.score)
                );
            }
        }
        s
    }

    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut out = Self::new();
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
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() < 3 {
                return Err(err(format!("too few fields ({})", f.len())));
            }
            let int = |s: &str| s.parse::<u64>().map_err(|_| err(format!("expected an integer, got `{s}`")));
            let num = |s: &str| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(format!("expected a finite number, got `{s}`"))),
            };
            let bbox = |s: &[&str]| -> Result<BoundingBox> {
                Ok(BoundingBox::new(num(s[0])?, num(s[1])?, num(s[2])?, num(s[3])?))
            };
            let key = FrameKey::new(int(f[0])?, int(f[1])?);
            if f[2] == "INT" {
                if f.len() != 14 && f.len() != 15 {
                    return Err(err(format!("interaction record needs 14 or 15 fields, got {}", f.len())));
                }
                let q = Quintuple {
                    instrument: int(f[3])? as usize,
                    instrument_box: bbox(&f[4..8])?,
                    tissue: int(f[8])? as usize,
                    tissue_box: bbox(&f[9..13])?,
                    action: int(f[13])? as usize,
                    score: if f.len() == 15 { num(f[14])? } else { 1.0 },
                };
                out.push_quintuple(key, q);
            } else {
                if f.len() != 8 && f.len() != 9 {
                    return Err(err(format!("instance record needs 8 or 9 fields, got {}", f.len())));
                }
                let role: Role = f[2].parse().map_err(err)?;
                let score = if f.len() == 9 { num(f[8])? } else { 1.0 };
                out.push_instance(key, Detection::new(role, int(f[3])? as usize, bbox(&f[4..8])?, score));
            }
        }
        Ok(out)
    }
}

pub fn write_annotations(ann: &Annotations, path: &Path) -> Result<()> {
    let mut text = String::from("# video frame role category x1 y1 x2 y2 [score]\n");
    text.push_str("# video frame INT ins ix1 iy1 ix2 iy2 tis tx1 ty1 tx2 ty2 action [score]\n");
    text.push_str(&ann.to_text());
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Annotations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Annotations::parse(&text, &path.display().to_string())
}
