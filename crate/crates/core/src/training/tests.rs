use proptest::prelude::*;

use super::*;
use crate::detection::boxes::encode;
use crate::interaction::InteractionConfig;
use crate::numeric::gradcheck::{check_inputs, check_params, GradCheckOptions};
use crate::simdata::{build_prior_table, generate_snippet, ScenarioConfig};
use crate::types::Role;

fn tiny_det() -> DetectionConfig {
    DetectionConfig {
        backbone_channels: vec![4, 8, 8],
        feature_dim: 12,
        roi_size: 3,
        num_proposals: 10,
        input_height: Some(48),
        spatial_hidden: 8,
        ..Default::default()
    }
}

fn tiny_int(det: &DetectionConfig) -> InteractionConfig {
    InteractionConfig {
        feature_dim: 12,
        roi_size: det.roi_size,
        ..Default::default()
    }
}

fn interacting_snippets(n: usize) -> Vec<AnnotatedSnippet> {
    let sc = ScenarioConfig::default();
    (0..).map(|id| generate_snippet(&sc, id).unwrap()).filter(|s| !s.quintuples.is_empty()).take(n).collect()
}

fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::new(x, y, x + w, y + h)
}

#[test]
fn schedule_follows_decay_epochs() {
    let c = TrainConfig::stage1();
    for e in 1..=20 {
        let expect = match e {
            1..=10 => 0.001,
            11..=15 => 0.0001,
            _ => 0.00001,
        };
        assert!((c.learning_rate_at(e) - expect).abs() < 1e-15, "epoch {e}");
    }
    assert_eq!(TrainConfig::stage2().learning_rate, 0.0001);
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::stage1() },
        TrainConfig { epochs: 12, ..TrainConfig::stage1() },
        TrainConfig { learning_rate: -1.0, ..TrainConfig::stage1() },
        TrainConfig { momentum: 1.0, ..TrainConfig::stage1() },
        TrainConfig { max_steps: Some(0), ..TrainConfig::stage1() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    TrainConfig::stage2().validate().unwrap();
}

#[test]
fn stage1_targets_examples() {
    let cfg = DetectionConfig::default();
    let a = Detection::new(Role::Instrument, 1, bx(0.0, 0.0, 10.0, 10.0), 1.0);
    let t = assign_stage1_targets(&cfg, &[a.bbox], std::slice::from_ref(&a), 0.5);
    assert_eq!(t.labels, vec![cfg.class_index(Role::Instrument, 1)]);
    assert!(t.box_targets.data().iter().all(|&v| v == 0.0));
    assert_eq!(t.box_weights.data().iter().sum::<f64>(), 4.0);

    let t = assign_stage1_targets(&cfg, &[a.bbox, bx(40.0, 40.0, 5.0, 5.0)], &[], 0.5);
    assert_eq!(t.labels, vec![cfg.background(); 2]);
    assert!(t.box_weights.data().iter().all(|&v| v == 0.0));

    let p = a.bbox.translate(2.5, 0.0);
    let b = Detection::new(Role::Tissue, 2, p.translate(30.0 / 7.0, 0.0), 1.0);
    assert!((iou(&p, &a.bbox) - 0.6).abs() < 1e-12);
    assert!((iou(&p, &b.bbox) - 0.4).abs() < 1e-12);
    let t = assign_stage1_targets(&cfg, &[p], &[b.clone(), a.clone()], 0.5);
    assert_eq!(t.labels, vec![cfg.class_index(Role::Instrument, 1)]);
    let cls = cfg.class_index(Role::Instrument, 1);
    assert_eq!(&t.box_targets.data()[4 * cls..4 * cls + 4], &encode(&p, &a.bbox));

    // Both above threshold: the higher overlap wins.
    let c = Detection::new(Role::Tissue, 0, p.translate(0.5, 0.0), 1.0);
    let t = assign_stage1_targets(&cfg, &[p], &[a, c], 0.5);
    assert_eq!(t.labels, vec![cfg.class_index(Role::Tissue, 0)]);
}

fn head(g: &mut Graph, logits: Tensor, deltas: Tensor) -> HeadOutput {
    let logits = g.leaf(logits);
    HeadOutput {
        logits,
        deltas: g.leaf(deltas),
        features: logits,
    }
}

#[test]
fn stage1_loss_limits() {
    let cfg = DetectionConfig {
        num_instruments: 1,
        num_tissues: 1,
        ..Default::default()
    };
    let gt = Detection::new(Role::Tissue, 0, bx(0.0, 0.0, 10.0, 10.0), 1.0);
    let props = [gt.bbox, bx(30.0, 30.0, 8.0, 8.0)];
    let t = assign_stage1_targets(&cfg, &props, &[gt], 0.5);
    let mut g = Graph::new();
    let mut logits = Tensor::zeros(&[2, 3]);
    logits.data_mut()[1] = 40.0;
    logits.data_mut()[5] = 40.0;
    let out = head(&mut g, logits, Tensor::zeros(&[2, 8]));
    let l = stage1_loss(&mut g, &out, &t).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let t = assign_stage1_targets(&cfg, &props[1..], &[], 0.5);
    let mut g = Graph::new();
    let out = head(&mut g, Tensor::zeros(&[1, 3]), Tensor::full(&[1, 8], 3.0));
    let l = stage1_loss(&mut g, &out, &t).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);
}

#[test]
fn stage1_loss_gradcheck() {
    let cfg = DetectionConfig {
        num_instruments: 2,
        num_tissues: 1,
        ..Default::default()
    };
    let gt = [
        Detection::new(Role::Instrument, 1, bx(0.0, 0.0, 10.0, 10.0), 1.0),
        Detection::new(Role::Tissue, 0, bx(20.0, 5.0, 12.0, 9.0), 1.0),
    ];
    let props = [bx(1.0, 0.5, 10.0, 9.0), bx(21.0, 5.0, 12.0, 10.0), bx(50.0, 50.0, 6.0, 6.0)];
    let t = assign_stage1_targets(&cfg, &props, &gt, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rand = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rand::Rng::gen_range(rng, -0.5..0.5)).collect()).unwrap()
    };
    let inputs = [rand(&mut rng, &[3, 4]), rand(&mut rng, &[3, 12])];
    let r = check_inputs(
        &inputs,
        |g, v| {
            let out = HeadOutput {
                logits: v[0],
                deltas: v[1],
                features: v[0],
            };
            stage1_loss(g, &out, &t)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

fn quint(i: usize, ib: BoundingBox, t: usize, tb: BoundingBox, a: usize) -> Quintuple {
    Quintuple {
        instrument: i,
        instrument_box: ib,
        tissue: t,
        tissue_box: tb,
        action: a,
        score: 1.0,
    }
}

#[test]
fn stage2_targets_examples() {
    let ib = bx(0.0, 0.0, 10.0, 10.0);
    let tb = bx(20.0, 0.0, 20.0, 20.0);
    let ins = Detection::new(Role::Instrument, 1, ib, 0.9);
    let tis = Detection::new(Role::Tissue, 2, tb, 0.8);
    assert_eq!(assign_stage2_targets(&ins, &tis, &[quint(1, ib, 2, tb, 3)], 0.5, 5), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    // Tissue overlap 0.3 makes the pair negative whatever the instrument overlap.
    let far = Detection::new(Role::Tissue, 2, tb.translate(20.0 * 7.0 / 13.0, 0.0), 0.8);
    assert!((iou(&far.bbox, &tb) - 0.3).abs() < 1e-12);
    assert_eq!(assign_stage2_targets(&ins, &far, &[quint(1, ib, 2, tb, 3)], 0.5, 5), vec![0.0; 5]);
    // Wrong category is negative too.
    assert_eq!(assign_stage2_targets(&ins, &tis, &[quint(0, ib, 2, tb, 3)], 0.5, 5), vec![0.0; 5]);
    // Two GT quintuples sharing the instrument both light up.
    let both = [quint(1, ib, 2, tb, 0), quint(1, ib, 2, tb, 4)];
    assert_eq!(assign_stage2_targets(&ins, &tis, &both, 0.5, 5), vec![1.0, 0.0, 0.0, 0.0, 1.0]);
}

proptest! {
    #[test]
    fn stage2_targets_ignore_gt_order(specs in prop::collection::vec((0usize..2, 0usize..4, 0usize..2, 0usize..4, 0usize..3), 0..6), rot in 0usize..6) {
        let grid = |i: usize| bx(i as f64 * 3.0, 0.0, 10.0, 10.0);
        let gt: Vec<Quintuple> = specs.iter().map(|&(i, ib, t, tb, a)| quint(i, grid(ib), t, grid(tb).translate(0.0, 40.0), a)).collect();
        let ins = Detection::new(Role::Instrument, 0, grid(1), 1.0);
        let tis = Detection::new(Role::Tissue, 1, grid(1).translate(0.0, 40.0), 1.0);
        let mut rotated = gt.clone();
        if !rotated.is_empty() {
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
        }
        prop_assert_eq!(assign_stage2_targets(&ins, &tis, &gt, 0.5, 3), assign_stage2_targets(&ins, &tis, &rotated, 0.5, 3));
    }
}

#[test]
fn stage2_loss_limits() {
    let target = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::new();
    let p = g.leaf(Tensor::new(&[1, 3], vec![1.0 - 1e-9, 1e-9, 1e-9]).unwrap());
    let l = stage2_loss(&mut g, p, &target, 0.25, 2.0).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let probs = [0.7, 0.2, 0.6];
    let mut g = Graph::new();
    let p = g.leaf(Tensor::new(&[1, 3], probs.to_vec()).unwrap());
    let l = stage2_loss(&mut g, p, &target, 0.25, 0.0).unwrap();
    let bce = (-0.25 * 0.7f64.ln() - 0.75 * 0.8f64.ln() - 0.75 * 0.4f64.ln()) / 3.0;
    assert!((g.value(l).item() - bce).abs() < 1e-12);
}

#[test]
fn stage2_loss_gradcheck_through_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let int = InteractionModel::new(tiny_int(&tiny_det()), 3, &mut rng).unwrap();
    let rand = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect()).unwrap()
    };
    let (fi, ft, map) = (rand(&mut rng, &[2, 12]), rand(&mut rng, &[1, 12]), rand(&mut rng, &[3, 4, 4]));
    let se = crate::geometry::encode_pairs(&[bx(0.0, 0.0, 5.0, 5.0), bx(3.0, 1.0, 4.0, 6.0)], &[bx(10.0, 2.0, 8.0, 8.0)], 32.0, 32.0)
        .unwrap()
        .reshaped(&[2, 16])
        .unwrap();
    let mut target = Tensor::zeros(&[2, 5]);
    target.data_mut()[2] = 1.0;
    let r = check_params(
        &int.store,
        |g, s| {
            let mut m = int.clone();
            m.store = s.clone();
            let (a, b, mv) = (g.constant(fi.clone()), g.constant(ft.clone()), g.constant(map.clone()));
            let s_a = m.readout(g, a, b, &se, mv)?;
            stage2_loss(g, s_a, &target, 0.25, 2.0)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn metrics_line_format() {
    let m = EpochMetrics {
        epoch: 3,
        split: "val",
        loss: 0.25,
        map_it: Some(0.5),
        map_iti: None,
    };
    assert_eq!(m.to_string(), "3, val, 0.250000, 0.500000, -");
}

fn overfit_cfg(steps_per_epoch: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 0.01,
        decay_epochs: vec![],
        resample_proposals: false,
        seed: 11,
        max_steps: Some(steps_per_epoch * epochs),
        ..TrainConfig::stage1()
    }
}

#[test]
fn overfitting_one_snippet_lowers_every_epoch_mean() {
    let s = interacting_snippets(1).remove(0);
    let data = vec![s; 20];
    let mut det = DetectionModel::new(tiny_det(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    // Momentum overshoots near the minimum without a late decay.
    let cfg = TrainConfig {
        decay_epochs: vec![6],
        ..overfit_cfg(20, 10)
    };
    let out = train_stage1(&mut det, &cfg, &data, None).unwrap();
    assert_eq!(out.steps(), 200);
    let means: Vec<f64> = out.log.iter().map(|m| m.loss).collect();
    assert_eq!(means.len(), 10);
    for w in means.windows(2) {
        assert!(w[1] < w[0], "{means:?}");
    }
}

fn train_both(seed: u64, data: &[AnnotatedSnippet]) -> (DetectionModel, InteractionModel, String) {
    let sc = ScenarioConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut det = DetectionModel::new(tiny_det(), &mut rng).unwrap();
    let c1 = TrainConfig {
        epochs: 2,
        decay_epochs: vec![1],
        learning_rate: 0.01,
        seed,
        ..TrainConfig::stage1()
    };
    let o1 = train_stage1(&mut det, &c1, data, Some(&data[..1])).unwrap();
    let before = det.store.clone();
    let mut int = InteractionModel::new(tiny_int(&det.cfg), 8, &mut rng).unwrap();
    let c2 = TrainConfig {
        learning_rate: 0.01,
        ..c1
    };
    let o2 = train_stage2(&mut int, &det, &build_prior_table(&sc), &c2, data, Some(&data[..1])).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(det.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    (det, int, o1.log_text() + &o2.log_text())
}

#[test]
fn seeded_runs_are_bitwise_identical() {
    let data = interacting_snippets(3);
    let (d1, i1, l1) = train_both(4, &data);
    let (d2, i2, l2) = train_both(4, &data);
    for (s1, s2) in [(&d1.store, &d2.store), (&i1.store, &i2.store)] {
        for ((_, a), (_, b)) in s1.iter().zip(s2.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
    }
    assert_eq!(l1, l2);
    assert!(l1.lines().any(|l| l.starts_with("2, val, ")));
    let (d3, _, _) = train_both(5, &data);
    assert!(d1.store.iter().zip(d3.store.iter()).any(|((_, a), (_, b))| a.value != b.value));
}

#[test]
fn non_finite_input_aborts_with_location() {
    let mut s = interacting_snippets(1).remove(0);
    s.frames[0].data_mut()[7] = f64::NAN;
    let mut det = DetectionModel::new(tiny_det(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let err = train_stage1(&mut det, &overfit_cfg(1, 1), &[s], None).unwrap_err();
    assert!(err.is_numerical());
    let msg = err.to_string();
    assert!(msg.contains("stage 1, epoch 1, step 1"), "{msg}");
}

#[test]
fn diverging_rate_aborts_as_numerical() {
    let data = interacting_snippets(2);
    let mut det = DetectionModel::new(tiny_det(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e150,
        momentum: 0.0,
        ..overfit_cfg(2, 5)
    };
    let err = train_stage1(&mut det, &cfg, &data, None).unwrap_err();
    assert!(err.is_numerical(), "{err}");
    assert!(err.to_string().contains("stage 1, epoch"), "{err}");
}
