use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use itid_core::checkpoint;
use itid_core::config::{Ablation, PipelineConfig};
use itid_core::evaluation::{clipwise_scores, format_json_lines, format_report, map_it, map_iti};
use itid_core::gradsuite::{self, Suite};
use itid_core::pipeline::{evaluate, init_detector, init_interaction, key_frame_ground_truth, EVAL_PROPOSAL_OFFSET};
use itid_core::simdata::{self, Split};
use itid_core::training::{train_stage1, train_stage2};

use crate::dataset::{self, CONFIG};
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::UsageError;

pub const SEED_VAR: &str = "ITID_SEED";
pub const METRICS: &str = "metrics.log";
pub const STAGE1_CKPT: &str = "stage1.bin";
pub const STAGE2_CKPT: &str = "stage2.bin";
/// Frames per clip for the clip-wise scores.
const CLIP_LEN: u64 = 300;

/// Config from `path` (defaults when absent) with the seed override applied.
fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_VAR) {
        let seed = v.trim().parse().map_err(|_| UsageError(format!("{SEED_VAR}={v} is not an unsigned integer")))?;
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

fn write_text(out: &Path, name: &str, text: &str, manifest: &mut RunManifest) -> Result<()> {
    let p = out.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    manifest.artifacts.push(name.to_string());
    Ok(())
}

fn save_ckpt(out: &Path, name: &str, store: &itid_core::numeric::ParamStore, manifest: &mut RunManifest) -> Result<()> {
    let bin = out.join(name);
    checkpoint::save(store, &bin)?;
    manifest.artifacts.push(name.to_string());
    let m = checkpoint::manifest_path(Path::new(name));
    manifest.artifacts.push(m.display().to_string());
    Ok(())
}

/// The config saved beside a checkpoint, if any.
fn beside(ckpt: &Path) -> Option<PathBuf> {
    let p = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG);
    p.exists().then_some(p)
}

pub fn simulate(config: Option<&Path>, out: &Path, count: usize, force: bool) -> Result<()> {
    if count == 0 {
        return Err(UsageError("--count must be positive".into()).into());
    }
    let cfg = load_config(config)?;
    cfg.validate()?;
    prepare_out_dir(out, force)?;
    let mut manifest = RunManifest::start(config, cfg.scenario.seed, &cfg, out);
    manifest.write()?;
    write_text(out, CONFIG, &cfg.to_toml(), &mut manifest)?;
    let written = dataset::write(out, &cfg.scenario, count, &mut manifest)?;
    manifest.artifacts.extend(written);
    manifest.finish()?;

    let per = |s: Split| manifest.snippets.iter().filter(|r| r.split == s).count();
    let ann = simdata::read_annotations(&out.join(dataset::ANNOTATIONS))?;
    println!("snippets: {count} (train {}, val {}, test {})", per(Split::Train), per(Split::Val), per(Split::Test));
    println!("frames: {}", manifest.snippets.iter().map(|r| r.frames).sum::<usize>());
    println!("interactions: {}", ann.num_quintuples());
    println!("dataset sha256: {}", manifest.outputs_sha256.as_deref().unwrap_or("-"));
    Ok(())
}

pub struct TrainArgs<'a> {
    pub stage: u8,
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub stage1_ckpt: Option<&'a Path>,
    pub ablate: Option<Ablation>,
    pub r: Option<usize>,
    pub force: bool,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config)?;
    let stage1_ckpt = match (a.stage, a.stage1_ckpt) {
        (2, None) => return Err(UsageError("stage 2 needs --stage1-ckpt".into()).into()),
        (2, Some(p)) => {
            if !p.exists() {
                return Err(UsageError(format!("stage-1 checkpoint {} does not exist", p.display())).into());
            }
            if let Some(saved) = beside(p) {
                cfg.detection = PipelineConfig::load(&saved)?.detection;
            }
            Some(p)
        }
        (_, _) => None,
    };
    if let Some(ab) = a.ablate {
        cfg.apply(ab);
    }
    let data = dataset::load(a.data, a.r)?;
    cfg.scenario = data.scenario.clone();
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(UsageError(format!("dataset {} has no training snippets", a.data.display())).into());
    }
    let tc = if a.stage == 1 { &cfg.train1 } else { &cfg.train2 };
    prepare_out_dir(a.out, a.force)?;
    let mut manifest = RunManifest::start(a.config, tc.seed, &cfg, a.out);
    manifest.write()?;
    write_text(a.out, CONFIG, &cfg.to_toml(), &mut manifest)?;
    println!(
        "stage {}: lr={} momentum={} weight_decay={} epochs={} decay at {:?}, r={}{}",
        a.stage,
        tc.learning_rate,
        tc.momentum,
        tc.weight_decay,
        tc.epochs,
        tc.decay_epochs,
        cfg.scenario.r,
        a.ablate.map_or(String::new(), |ab| format!(", ablation {}", ab.name()))
    );
    let val = Some(&data.val[..]).filter(|v| !v.is_empty());
    let mut det = init_detector(&cfg.detection, cfg.train1.seed)?;
    let outcome = match stage1_ckpt {
        None => {
            let o = train_stage1(&mut det, &cfg.train1, &data.train, val)?;
            save_ckpt(a.out, STAGE1_CKPT, &det.store, &mut manifest)?;
            o
        }
        Some(p) => {
            checkpoint::load(&mut det.store, p)?;
            let mut int = init_interaction(&cfg.interaction, &det, cfg.train2.seed)?;
            let o = train_stage2(&mut int, &det, &data.prior, &cfg.train2, &data.train, val)?;
            save_ckpt(a.out, STAGE2_CKPT, &int.store, &mut manifest)?;
            o
        }
    };
    write_text(a.out, METRICS, &outcome.log_text(), &mut manifest)?;
    manifest.finish()?;
    print!("{}", outcome.log_text());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub config: Option<&'a Path>,
    pub data: &'a Path,
    pub out: &'a Path,
    pub stage1_ckpt: Option<&'a Path>,
    pub stage2_ckpt: Option<&'a Path>,
    pub predictions: Option<&'a Path>,
    pub json_lines: bool,
    pub force: bool,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let config_path = a
        .config
        .map(Path::to_path_buf)
        .or_else(|| a.stage2_ckpt.and_then(beside))
        .or_else(|| a.stage1_ckpt.and_then(beside));
    let mut cfg = load_config(config_path.as_deref())?;
    let data = dataset::load(a.data, None)?;
    cfg.scenario = data.scenario.clone();
    cfg.validate()?;
    if data.test.is_empty() {
        return Err(UsageError(format!("dataset {} has no test snippets", a.data.display())).into());
    }
    let models = match (a.predictions, a.stage1_ckpt, a.stage2_ckpt) {
        (Some(_), None, None) => None,
        (None, Some(s1), Some(s2)) => Some((s1, s2)),
        _ => return Err(UsageError("pass either --predictions or both --stage1-ckpt and --stage2-ckpt".into()).into()),
    };
    prepare_out_dir(a.out, a.force)?;
    let mut manifest = RunManifest::start(config_path.as_deref(), cfg.train2.seed, &cfg, a.out);
    manifest.write()?;

    let gt = key_frame_ground_truth(&data.test);
    let (preds, timing) = match models {
        None => {
            let p = simdata::read_annotations(a.predictions.expect("checked above"))?;
            (dataset::key_frames_only(p, &data.test), None)
        }
        Some((s1, s2)) => {
            let mut det = init_detector(&cfg.detection, cfg.train1.seed)?;
            checkpoint::load(&mut det.store, s1)?;
            let mut int = init_interaction(&cfg.interaction, &det, cfg.train2.seed)?;
            checkpoint::load(&mut int.store, s2)?;
            let ev = evaluate(&det, Some((&int, &data.prior)), &data.test, cfg.train2.seed + EVAL_PROPOSAL_OFFSET)?;
            (ev.predictions, Some(ev.seconds_per_key_frame))
        }
    };
    let (it, iti) = (map_it(&preds, &gt), map_iti(&preds, &gt));
    let report = format_report(&it, &iti);
    let json = format_json_lines(&it, &iti);
    let mut clips = String::from("# video clip mAP_ITI\n");
    for c in clipwise_scores(&preds, &gt, CLIP_LEN) {
        let v = c.map_iti.map_or_else(|| "skipped".to_string(), |x| format!("{x:.6}"));
        let _ = writeln!(clips, "{} {} {}", c.video, c.clip, v);
    }
    simdata::write_annotations(&preds, &a.out.join("predictions.txt"))?;
    manifest.artifacts.push("predictions.txt".into());
    write_text(a.out, "report.txt", &report, &mut manifest)?;
    write_text(a.out, "report.jsonl", &json, &mut manifest)?;
    write_text(a.out, "clipwise.txt", &clips, &mut manifest)?;
    manifest.finish()?;

    if a.json_lines {
        print!("{json}");
    } else {
        print!("{report}");
        if let Some(t) = timing {
            println!("inference: {:.4} s per key frame", t);
        }
    }
    Ok(())
}

pub fn gradcheck(suites: &[Suite], corrupt: Option<f64>) -> Result<()> {
    println!("{:<6} {:<26} {:>12} {:>7}  result", "module", "case", "max_rel_err", "coords");
    let mut failed = Vec::new();
    for &s in suites {
        for c in gradsuite::run(s, corrupt)? {
            let ok = c.passed();
            println!(
                "{:<6} {:<26} {:>12.3e} {:>7}  {}",
                s.name(),
                c.case,
                c.report.max_rel_error,
                c.report.coords_checked,
                if ok { "pass" } else { "FAIL" }
            );
            if !ok {
                failed.push(format!("{}/{}", s.name(), c.case));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(itid_core::Error::Numerical(format!("gradient check failed for {}", failed.join(", "))).into())
    }
}
