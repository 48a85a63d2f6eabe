//! Instrument-tissue interaction detection.
//!
//! A two-stage pipeline over short video snippets: stage one detects
//! instruments and tissues with snippet-context and cross-frame attention
//! refinement; stage two builds a temporal interaction graph over the
//! detections and scores an action for every instrument-tissue pair.

pub mod checkpoint;
pub mod config;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradsuite;
pub mod interaction;
pub mod numeric;
pub mod pipeline;
pub mod simdata;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use geometry::BoundingBox;
pub use types::{Detection, FrameKey, Quintuple, Role};
