use super::*;
use crate::error::Error;
use crate::types::FrameKey;
use crate::geometry::BoundingBox;

fn quiet() -> ScenarioConfig {
    ScenarioConfig {
        noise_std: 0.0,
        ..Default::default()
    }
}

#[test]
fn same_seed_and_id_give_identical_snippets() {
    let cfg = quiet();
    let a = generate_snippet(&cfg, 11).unwrap();
    let b = generate_snippet(&cfg, 11).unwrap();
    assert_eq!(a, b);
    let c = generate_snippet(&cfg, 12).unwrap();
    assert_ne!(a.frames, c.frames);
}

#[test]
fn noisy_generation_is_also_deterministic() {
    let cfg = ScenarioConfig::default();
    assert_eq!(generate_snippet(&cfg, 4).unwrap(), generate_snippet(&cfg, 4).unwrap());
}

#[test]
fn labels_agree_with_the_rule_oracle() {
    let cfg = ScenarioConfig::default();
    let mut labelled = 0;
    for id in 0..2000 {
        let layout = sample_layout(&cfg, id).unwrap();
        for ins in &layout.instruments {
            match &ins.target {
                Some((_, script)) => {
                    let oracle = classify_motion(&script.window()).map(Action::index);
                    assert_eq!(ins.action, oracle, "snippet {id}");
                    assert_eq!(Some(script.kind.index()), oracle);
                    labelled += 1;
                }
                None => assert!(ins.action.is_none()),
            }
        }
    }
    assert!(labelled > 1500);
}

#[test]
fn non_interaction_rate_matches_config() {
    for rate in [0.1, 0.3] {
        let cfg = ScenarioConfig {
            non_interaction_rate: rate,
            ..Default::default()
        };
        let n = 10_000;
        let idle = (0..n)
            .filter(|&id| !sample_layout(&cfg, id).unwrap().is_interaction())
            .count();
        let freq = idle as f64 / n as f64;
        assert!((freq - rate).abs() <= 0.02, "rate {rate}: observed {freq}");
    }
}

#[test]
fn quintuple_boxes_are_instances_and_inside_the_frame() {
    let cfg = quiet();
    for id in 0..40 {
        let s = generate_snippet(&cfg, id).unwrap();
        assert_eq!(s.frames.len(), cfg.r + 1);
        let key = s.key_index();
        for q in &s.quintuples {
            let boxes = s.gt_boxes(key);
            assert!(boxes.contains(&q.instrument_box));
            assert!(boxes.contains(&q.tissue_box));
        }
        for frame in &s.instances {
            for d in frame {
                let b = d.bbox;
                assert!(b.is_valid());
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= cfg.width as f64 && b.y2 <= cfg.height as f64);
            }
        }
    }
}

#[test]
fn action_frequencies_are_imbalanced() {
    let cfg = ScenarioConfig::default();
    let mut counts = vec![0usize; cfg.num_actions];
    for id in 0..3000 {
        for ins in sample_layout(&cfg, id).unwrap().instruments {
            if let Some(a) = ins.action {
                counts[a] += 1;
            }
        }
    }
    let max = *counts.iter().max().unwrap() as f64;
    let min = *counts.iter().min().unwrap() as f64;
    assert!(min > 0.0);
    assert!(max / min >= 5.0, "{counts:?}");
}

#[test]
fn other_frame_sizes_and_window_lengths_work() {
    for r in [0, 1, 5, 7] {
        let cfg = ScenarioConfig {
            r,
            width: 160,
            height: 112,
            noise_std: 0.0,
            ..Default::default()
        };
        let s = generate_snippet(&cfg, 1).unwrap();
        assert_eq!(s.frames.len(), r + 1);
        assert_eq!(s.frames[0].shape(), &[3, 112, 160]);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cfg = ScenarioConfig {
        num_actions: 0,
        ..Default::default()
    };
    assert!(generate_snippet(&cfg, 0).is_err());
    let mut cfg = ScenarioConfig::default();
    cfg.action_weights.pop();
    assert!(cfg.validate().is_err());
    let cfg = ScenarioConfig {
        combos: vec![(9, 0, 0)],
        ..Default::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn annotation_round_trip_is_exact() {
    let cfg = quiet();
    let snippets: Vec<_> = (0..5).map(|id| generate_snippet(&cfg, id).unwrap()).collect();
    let ann = Annotations::from_snippets(&snippets);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gt.txt");
    write_annotations(&ann, &path).unwrap();
    assert_eq!(read_annotations(&path).unwrap(), ann);
}

#[test]
fn scored_records_round_trip() {
    let mut ann = Annotations::new();
    let key = FrameKey::new(3, 2);
    ann.push_instance(key, Detection::new(Role::Tissue, 1, BoundingBox::new(0.125, 1.0 / 3.0, 7.5, 9.0), 0.3));
    ann.push_quintuple(
        key,
        Quintuple {
            instrument: 0,
            instrument_box: BoundingBox::new(1.0, 2.0, 3.0, 4.0),
            tissue: 1,
            tissue_box: BoundingBox::new(0.1, 0.2, 0.7, 0.9),
            action: 4,
            score: 0.123456789,
        },
    );
    assert_eq!(Annotations::parse(&ann.to_text(), "mem").unwrap(), ann);
}

#[test]
fn empty_frame_writes_nothing_and_reads_back_empty() {
    let s = AnnotatedSnippet {
        id: 9,
        width: 8,
        height: 8,
        frames: vec![Tensor::zeros(&[3, 8, 8])],
        instances: vec![Vec::new()],
        quintuples: Vec::new(),
    };
    let ann = Annotations::from_snippets(&[s]);
    assert_eq!(ann.to_text(), "");
    let back = Annotations::parse("", "mem").unwrap();
    assert_eq!(back.frame(FrameKey::new(9, 0)), FrameAnnotation::default());
}

#[test]
fn hand_written_file_parses() {
    let text = "# comment\n\
                5 0 instrument 2 10 20 30 27\n\
                5 0 tissue 1 40 30 70 60\n\
                5 0 INT 2 10 20 30 27 1 40 30 70 60 3\n";
    let ann = Annotations::parse(text, "hand").unwrap();
    let f = ann.frame(FrameKey::new(5, 0));
    assert_eq!(
        f.instances,
        vec![
            Detection::new(Role::Instrument, 2, BoundingBox::new(10.0, 20.0, 30.0, 27.0), 1.0),
            Detection::new(Role::Tissue, 1, BoundingBox::new(40.0, 30.0, 70.0, 60.0), 1.0),
        ]
    );
    assert_eq!(f.quintuples.len(), 1);
    let q = &f.quintuples[0];
    assert_eq!((q.instrument, q.tissue, q.action, q.score), (2, 1, 3, 1.0));
    assert_eq!(q.tissue_box, BoundingBox::new(40.0, 30.0, 70.0, 60.0));
}

#[test]
fn malformed_line_reports_its_number() {
    let text = "1 0 tissue 0 1 2 3 4\n\n1 0 tissue zero 1 2 3 4\n";
    match Annotations::parse(text, "bad.txt") {
        Err(Error::Parse { line, path, .. }) => {
            assert_eq!(line, 3);
            assert_eq!(path, "bad.txt");
        }
        other => panic!("{other:?}"),
    }
    assert!(Annotations::parse("1 0 INT 1 2 3", "x").is_err());
    assert!(Annotations::parse("1 0 robot 0 1 2 3 4", "x").is_err());
    assert!(Annotations::parse("1 0 tissue 0 1 2 3 NaN", "x").is_err());
}

#[test]
fn prior_table_single_action_instrument() {
    let cfg = ScenarioConfig {
        num_instruments: 2,
        num_tissues: 2,
        combos: vec![(0, 0, 0), (0, 1, 0), (1, 0, 1), (1, 1, 2)],
        ..Default::default()
    };
    let table = build_prior_table(&cfg);
    assert_eq!(table.instruments[0], [0].into_iter().collect());
    assert_eq!(table.instruments[1], [1, 2].into_iter().collect());
    assert_eq!(table.tissues[1], [0, 2].into_iter().collect());
    assert_eq!(table.admissible(0, 1), vec![true, false, false, false, false]);
}

#[test]
fn prior_table_admits_every_generated_label() {
    let cfg = quiet();
    let table = build_prior_table(&cfg);
    for id in 0..300 {
        let s = generate_snippet(&cfg, id).unwrap();
        for q in &s.quintuples {
            assert!(table.admissible(q.instrument, q.tissue)[q.action], "{q:?}");
        }
    }
}

#[test]
fn prior_table_text_round_trip() {
    let mut table = build_prior_table(&ScenarioConfig::default());
    table.tissues[3].clear();
    let back = PriorTable::parse(&table.to_text(), 5, "prior").unwrap();
    assert_eq!(back, table);
    assert!(PriorTable::parse("instrument 0 0,9\n", 5, "p").is_err());
}

#[test]
fn missing_category_admits_everything() {
    let table = build_prior_table(&ScenarioConfig::default());
    assert_eq!(table.admissible(17, 0), table.tissues[0].iter().fold(vec![false; 5], |mut v, &a| {
        v[a] = true;
        v
    }));
}

#[test]
fn splits_are_disjoint_and_stable() {
    let train = Split::Train.ids(200);
    let test = Split::Test.ids(50);
    assert!(train.iter().all(|id| !test.contains(id)));
    assert_eq!(train, Split::Train.ids(200));
    assert!(train.iter().all(|&id| Split::of(id) == Split::Train));
}

#[test]
fn png_round_trip_preserves_quantised_frames() {
    let s = generate_snippet(&ScenarioConfig::default(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.png");
    save_frame_png(&s.frames[0], &path).unwrap();
    let back = load_frame_png(&path).unwrap();
    assert_eq!(back.shape(), s.frames[0].shape());
    assert!(back.max_abs_diff(&s.frames[0]) < 1e-12);
}

#[test]
fn clamped_fallback_is_rare() {
    let cfg = ScenarioConfig::default();
    let clamped = (0..2000).filter(|&id| sample_layout(&cfg, id).unwrap().clamped).count();
    assert!(clamped <= 20, "{clamped} clamped layouts");
}

fn hidden_fraction(b: &BoundingBox, rect: &BoundingBox) -> f64 {
    let w = (b.x2.min(rect.x2) - b.x1.max(rect.x1)).max(0.0);
    let h = (b.y2.min(rect.y2) - b.y1.max(rect.y1)).max(0.0);
    w * h / b.area()
}

#[test]
fn occlusions_are_partial_and_short() {
    let cfg = ScenarioConfig::default();
    let mut events = 0;
    let mut on_key_instrument = 0;
    for id in 0..2000 {
        let l = sample_layout(&cfg, id).unwrap();
        if l.occlusions.is_empty() {
            continue;
        }
        events += 1;
        let frames: Vec<usize> = l.occlusions.iter().map(|o| o.frame).collect();
        assert!(frames.len() <= 2 && frames.windows(2).all(|w| w[1] == w[0] + 1), "snippet {id}: {frames:?}");
        for o in &l.occlusions {
            let boxes = l.tissues.iter().map(|t| t.bbox).chain(l.instruments.iter().map(|i| i.boxes[o.frame]));
            for b in boxes {
                assert!(hidden_fraction(&b, &o.rect) <= 0.5 + 1e-9, "snippet {id} frame {}", o.frame);
            }
            if o.frame == cfg.r && l.instruments.iter().any(|i| hidden_fraction(&i.boxes[o.frame], &o.rect) > 0.4) {
                on_key_instrument += 1;
            }
        }
    }
    let rate = events as f64 / 2000.0;
    assert!((rate - cfg.occlusion_prob).abs() < 0.04, "{rate}");
    assert!(on_key_instrument > 100, "{on_key_instrument}");
}

#[test]
fn look_alike_instruments_differ_only_in_the_band() {
    use super::render::{instrument_band, instrument_color};
    assert_eq!(instrument_color(0, 4), instrument_color(1, 4));
    assert_eq!(instrument_color(2, 4), instrument_color(3, 4));
    assert_ne!(instrument_color(1, 4), instrument_color(2, 4));
    assert_ne!(instrument_band(0), instrument_band(1));
    assert_eq!(instrument_band(0), instrument_band(2));
}
