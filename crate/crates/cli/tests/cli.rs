use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_itid");

/// Small networks and a single optimisation step per stage.
const QUICK: &str = "
[detection]
backbone_channels = [4, 8]
feature_dim = 8
roi_size = 3
num_proposals = 8
spatial_hidden = 4
[interaction]
feature_dim = 8
roi_size = 3
[train1]
max_steps = 1
[train2]
max_steps = 1
";

fn itid(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("ITID_SEED").output().expect("binary runs")
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, extra_config: &str, count: usize) -> PathBuf {
    let cfg = write(dir, &format!("{name}.toml"), &format!("{QUICK}{extra_config}"));
    let out = dir.join(name);
    let o = itid(&["simulate", "--config", s(&cfg), "--out", s(&out), "--count", &count.to_string()]);
    assert!(o.status.success(), "{:?}", text(&o));
    out
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_records_every_snippet_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let a = simulate(t.path(), "a", "", 10);
    let b = simulate(t.path(), "b", "", 10);
    let m = manifest(&a);
    assert_eq!(m["snippets"].as_array().unwrap().len(), 10);
    assert!(m["finished_unix"].is_u64());
    assert_eq!(m["outputs_sha256"], manifest(&b)["outputs_sha256"]);
    assert_eq!(m["config_sha256"], manifest(&b)["config_sha256"]);
    for a in m["artifacts"].as_array().unwrap() {
        assert!(t.path().join("a").join(a.as_str().unwrap()).exists(), "{a}");
    }
}

#[test]
fn non_empty_output_needs_force() {
    let t = tempfile::tempdir().unwrap();
    let out = simulate(t.path(), "d", "", 3);
    let cfg = t.path().join("d.toml");
    let o = itid(&["simulate", "--config", s(&cfg), "--out", s(&out), "--count", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("--force"));
    let o = itid(&["simulate", "--config", s(&cfg), "--out", s(&out), "--count", "3", "--force"]);
    assert!(o.status.success());
}

#[test]
fn unknown_config_key_is_named() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "bad.toml", "[train1]\nlearning_rat = 0.1\n");
    let o = itid(&["simulate", "--config", s(&cfg), "--out", s(&t.path().join("o")), "--count", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("learning_rat"), "{:?}", text(&o));
}

#[test]
fn usage_and_io_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(itid(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(itid(&["train", "--stage", "3", "--data", "x", "--out", "y"]).status.code(), Some(1));
    let data = simulate(t.path(), "d", "", 3);
    let o = itid(&["train", "--stage", "2", "--data", s(&data), "--out", s(&t.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).1.contains("--stage1-ckpt"));
    let missing = t.path().join("nowhere");
    let o = itid(&["train", "--stage", "1", "--data", s(&missing), "--out", s(&t.path().join("o2"))]);
    assert_eq!(o.status.code(), Some(3), "{:?}", text(&o));
    assert_eq!(itid(&["--help"]).status.code(), Some(0));
}

#[test]
fn default_schedule_is_echoed_per_stage() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", "", 12);
    let s1 = t.path().join("s1");
    let o = itid(&["train", "--stage", "1", "--data", s(&data), "--out", s(&s1), "--config", s(&t.path().join("d.toml"))]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.contains("stage 1: lr=0.001 "), "{}", text(&o).0);
    let ckpt = s1.join("stage1.bin");
    let o = itid(&["train", "--stage", "2", "--data", s(&data), "--out", s(&t.path().join("s2")), "--stage1-ckpt", s(&ckpt), "--config", s(&t.path().join("d.toml"))]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.contains("stage 2: lr=0.0001 "), "{}", text(&o).0);
    assert!(s1.join("stage1.manifest").exists() && s1.join("metrics.log").exists());
}

#[test]
fn ablation_and_reference_frame_flags_reach_the_config() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", "[scenario]\nr = 7\n", 12);
    let cfg = t.path().join("d.toml");
    for (flag, key) in [("no-scf", "use_scf = false"), ("no-sca", "use_sca = false"), ("no-tg", "use_inter = false")] {
        let out = t.path().join(flag);
        let o = itid(&["train", "--stage", "1", "--data", s(&data), "--out", s(&out), "--config", s(&cfg), "--ablate", flag]);
        assert!(o.status.success(), "{:?}", text(&o));
        let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(saved.contains(key), "{flag}: {saved}");
    }
    for r in [1, 3, 5, 7] {
        let out = t.path().join(format!("r{r}"));
        let o = itid(&["train", "--stage", "1", "--data", s(&data), "--out", s(&out), "--config", s(&cfg), "--r", &r.to_string()]);
        assert!(o.status.success(), "{:?}", text(&o));
        let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
        assert!(saved.contains(&format!("\nr = {r}\n")), "{saved}");
    }
    let o = itid(&["train", "--stage", "1", "--data", s(&data), "--out", s(&t.path().join("r9")), "--config", s(&cfg), "--r", "9"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_variable_overrides_every_seed() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write(t.path(), "c.toml", QUICK);
    let out = t.path().join("o");
    let o = Command::new(BIN)
        .args(["simulate", "--config", s(&cfg), "--out", s(&out), "--count", "2"])
        .env("ITID_SEED", "41")
        .output()
        .unwrap();
    assert!(o.status.success());
    let m = manifest(&out);
    assert_eq!(m["seed"], 41);
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(saved.matches("seed = 41").count(), 3, "{saved}");
}

#[test]
fn eval_of_ground_truth_and_of_nothing() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", "", 40);
    let o = itid(&["eval", "--data", s(&data), "--predictions", s(&data.join("annotations.txt")), "--out", s(&t.path().join("gt"))]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.contains("mAP_IT=1.0000, mAP_ITI=1.0000"), "{}", text(&o).0);
    let empty = write(t.path(), "empty.txt", "# nothing\n");
    let o = itid(&["eval", "--data", s(&data), "--predictions", s(&empty), "--out", s(&t.path().join("none")), "--json-lines"]);
    assert!(o.status.success(), "{:?}", text(&o));
    let lines: Vec<serde_json::Value> = text(&o).0.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l["ap"] == 0.0), "{lines:?}");
    for f in ["report.txt", "report.jsonl", "clipwise.txt", "predictions.txt", "manifest.json"] {
        assert!(t.path().join("none").join(f).exists(), "{f}");
    }
}

#[test]
fn report_format_matches_golden_file() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", "", 40);
    let o = itid(&["eval", "--data", s(&data), "--predictions", s(&data.join("annotations.txt")), "--out", s(&t.path().join("gt"))]);
    let golden = include_str!("golden/report.txt");
    assert_eq!(text(&o).0, golden);
    assert_eq!(std::fs::read_to_string(t.path().join("gt/report.txt")).unwrap(), golden);
}

#[test]
fn eval_names_mismatched_tensors() {
    let t = tempfile::tempdir().unwrap();
    let data = simulate(t.path(), "d", "", 40);
    let cfg = t.path().join("d.toml");
    let s1 = t.path().join("s1");
    assert!(itid(&["train", "--stage", "1", "--data", s(&data), "--out", s(&s1), "--config", s(&cfg)]).status.success());
    let s2 = t.path().join("s2");
    let ck1 = s1.join("stage1.bin");
    assert!(itid(&["train", "--stage", "2", "--data", s(&data), "--out", s(&s2), "--stage1-ckpt", s(&ck1)]).status.success());
    let wider = write(t.path(), "wider.toml", &QUICK.replace("feature_dim = 8\nroi_size = 3\nnum_proposals", "feature_dim = 12\nroi_size = 3\nnum_proposals"));
    let o = itid(&[
        "eval", "--data", s(&data), "--stage1-ckpt", s(&ck1), "--stage2-ckpt", s(&s2.join("stage2.bin")), "--out", s(&t.path().join("e")), "--config", s(&wider),
    ]);
    assert_eq!(o.status.code(), Some(1), "{:?}", text(&o));
    let err = text(&o).1;
    assert!(err.contains("`det.box_head.weight` has shape 72x8 in file, model expects 72x12"), "{err}");
    let o = itid(&["eval", "--data", s(&data), "--stage1-ckpt", s(&ck1), "--stage2-ckpt", s(&s2.join("stage2.bin")), "--out", s(&t.path().join("ok"))]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(text(&o).0.contains("mAP_IT="));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let start = std::time::Instant::now();
    let o = itid(&["gradcheck", "--module", "all"]);
    assert!(o.status.success(), "{:?}", text(&o));
    assert!(start.elapsed().as_secs() < 60);
    assert!(!text(&o).0.contains("FAIL"));
    let o = itid(&["gradcheck", "--module", "tg", "--corrupt", "0.01"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).0.contains("FAIL"));
}
