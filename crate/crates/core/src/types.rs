use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Instrument,
    Tissue,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Instrument => "instrument",
            Role::Tissue => "tissue",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instrument" => Ok(Role::Instrument),
            "tissue" => Ok(Role::Tissue),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// Identifies one frame of one video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrameKey {
    pub video: u64,
    pub frame: u64,
}

impl FrameKey {
    pub fn new(video: u64, frame: u64) -> Self {
        Self { video, frame }
    }
}

/// A scored (or ground-truth, score 1) instrument or tissue instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub role: Role,
    pub category: usize,
    pub bbox: BoundingBox,
    pub score: f64,
    pub frame: usize,
}

impl Detection {
    pub fn new(role: Role, category: usize, bbox: BoundingBox, score: f64) -> Self {
        Self {
            role,
            category,
            bbox,
            score,
            frame: 0,
        }
    }

    pub fn with_frame(mut self, frame: usize) -> Self {
        self.frame = frame;
        self
    }
}

/// ⟨instrument class, instrument box, tissue class, tissue box, action class⟩ with a score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quintuple {
    pub instrument: usize,
    pub instrument_box: BoundingBox,
    pub tissue: usize,
    pub tissue_box: BoundingBox,
    pub action: usize,
    pub score: f64,
}

impl Quintuple {
    /// The interaction class triple used to group average precision.
    pub fn class_key(&self) -> (usize, usize, usize) {
        (self.instrument, self.tissue, self.action)
    }
}
