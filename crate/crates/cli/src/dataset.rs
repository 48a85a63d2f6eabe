//! Dataset directories written by `simulate`.
//!
//! ```text
//! manifest.json      run manifest with one record per snippet
//! config.toml        resolved configuration
//! annotations.txt    every frame of every snippet; video id = snippet id
//! prior.txt          admissible actions per category pair
//! frames/<id>/<f>.png
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use itid_core::config::PipelineConfig;
use itid_core::simdata::{self, AnnotatedSnippet, Annotations, PriorTable, ScenarioConfig, Split};
use itid_core::FrameKey;

use crate::manifest::{RunManifest, SnippetRecord};
use crate::UsageError;

pub const ANNOTATIONS: &str = "annotations.txt";
pub const PRIOR: &str = "prior.txt";
pub const CONFIG: &str = "config.toml";

pub fn frame_path(id: u64, f: usize) -> PathBuf {
    Path::new("frames").join(id.to_string()).join(format!("{f}.png"))
}

/// Writes snippets `0..count` and returns the artifact paths written.
pub fn write(dir: &Path, cfg: &ScenarioConfig, count: usize, manifest: &mut RunManifest) -> Result<Vec<String>> {
    let mut ann = Annotations::new();
    let mut artifacts = Vec::new();
    for id in 0..count as u64 {
        let s = simdata::generate_snippet(cfg, id)?;
        let sub = dir.join("frames").join(id.to_string());
        std::fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        for (f, img) in s.frames.iter().enumerate() {
            let rel = frame_path(id, f);
            simdata::save_frame_png(img, &dir.join(&rel))?;
            artifacts.push(rel.display().to_string());
        }
        merge(&mut ann, &Annotations::from_snippets(std::slice::from_ref(&s)));
        manifest.snippets.push(SnippetRecord {
            id,
            split: Split::of(id),
            frames: s.frames.len(),
        });
    }
    simdata::write_annotations(&ann, &dir.join(ANNOTATIONS))?;
    let prior = simdata::build_prior_table(cfg);
    std::fs::write(dir.join(PRIOR), prior.to_text()).with_context(|| format!("writing {}", dir.join(PRIOR).display()))?;
    artifacts.insert(0, PRIOR.to_string());
    artifacts.insert(0, ANNOTATIONS.to_string());
    Ok(artifacts)
}

pub struct Dataset {
    pub scenario: ScenarioConfig,
    pub prior: PriorTable,
    pub train: Vec<AnnotatedSnippet>,
    pub val: Vec<AnnotatedSnippet>,
    pub test: Vec<AnnotatedSnippet>,
}

/// Loads a dataset; with `r`, snippets are cut to `r` reference frames.
pub fn load(dir: &Path, r: Option<usize>) -> Result<Dataset> {
    let manifest = RunManifest::read(dir)?;
    let cfg = PipelineConfig::parse(&manifest.config, &dir.join(crate::manifest::FILE).display().to_string())?;
    let mut scenario = cfg.scenario;
    let stored_r = scenario.r;
    if let Some(r) = r {
        if r == 0 || r > stored_r {
            return Err(UsageError(format!("--r {r} needs between 1 and {stored_r} reference frames (dataset holds {stored_r})")).into());
        }
        scenario.r = r;
    }
    let ann = simdata::read_annotations(&dir.join(ANNOTATIONS))?;
    let prior_path = dir.join(PRIOR);
    let text = std::fs::read_to_string(&prior_path).with_context(|| format!("reading {}", prior_path.display()))?;
    let prior = PriorTable::parse(&text, scenario.num_actions, &prior_path.display().to_string())?;

    let mut out = Dataset {
        scenario: scenario.clone(),
        prior,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for rec in &manifest.snippets {
        let frames = (0..rec.frames)
            .map(|f| simdata::load_frame_png(&dir.join(frame_path(rec.id, f))))
            .collect::<itid_core::Result<Vec<_>>>()?;
        let instances = (0..rec.frames)
            .map(|f| ann.frame(FrameKey::new(rec.id, f as u64)).instances)
            .collect();
        let key = FrameKey::new(rec.id, rec.frames as u64 - 1);
        let s = AnnotatedSnippet {
            id: rec.id,
            width: scenario.width,
            height: scenario.height,
            frames,
            instances,
            quintuples: ann.frame(key).quintuples,
        };
        let s = s.last_frames(scenario.r)?;
        match rec.split {
            Split::Train => out.train.push(s),
            Split::Val => out.val.push(s),
            Split::Test => out.test.push(s),
        }
    }
    Ok(out)
}

fn merge(into: &mut Annotations, from: &Annotations) {
    for (k, fa) in from.iter() {
        fa.instances.iter().for_each(|d| into.push_instance(*k, d.clone()));
        fa.quintuples.iter().for_each(|q| into.push_quintuple(*k, q.clone()));
    }
}

/// Predictions restricted to the key frames of `snippets`.
pub fn key_frames_only(preds: Annotations, snippets: &[AnnotatedSnippet]) -> Annotations {
    let keys: BTreeSet<FrameKey> = snippets.iter().map(|s| FrameKey::new(s.id, s.key_index() as u64)).collect();
    let mut out = Annotations::new();
    for (k, fa) in preds.iter().filter(|(k, _)| keys.contains(k)) {
        fa.instances.iter().for_each(|d| out.push_instance(*k, d.clone()));
        fa.quintuples.iter().for_each(|q| out.push_quintuple(*k, q.clone()));
    }
    out
}
