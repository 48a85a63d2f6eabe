//! Finite-difference suites over the trainable modules at default sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::{DetectionConfig, HeadOutput, ScaLayer, ScfLayer};
use crate::error::Result;
use crate::geometry::{encode_pairs, BoundingBox, SPATIAL_DIM};
use crate::interaction::{InteractionConfig, InteractionModel};
use crate::numeric::gradcheck::{check_inputs, check_params, GradCheckOptions, GradCheckReport};
use crate::numeric::{Graph, ParamStore, Tensor, Var};
use crate::training::{assign_stage1_targets, stage1_loss, stage2_loss};
use crate::types::{Detection, Role};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Coordinates sampled per tensor.
const COORDS: usize = 24;

const W: f64 = 128.0;
const H: f64 = 96.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Scf,
    Sca,
    Tg,
    Loss,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Ops, Suite::Scf, Suite::Sca, Suite::Tg, Suite::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Scf => "scf",
            Suite::Sca => "sca",
            Suite::Tg => "tg",
            Suite::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub suite: Suite,
    pub case: &'static str,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches length")
}

fn rand_boxes(rng: &mut ChaCha8Rng, n: usize) -> Vec<BoundingBox> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..W - 30.0);
            let y = rng.gen_range(0.0..H - 24.0);
            BoundingBox::new(x, y, x + rng.gen_range(8.0..30.0), y + rng.gen_range(6.0..24.0))
        })
        .collect()
}

/// Weighted sum so every output entry carries a distinct gradient.
fn contract(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let y = g.mul(y, w)?;
    g.sum(y)
}

fn interaction_model(rng: &mut ChaCha8Rng) -> Result<(InteractionModel, usize)> {
    let det = DetectionConfig::default();
    let channels = *det.backbone_channels.last().expect("non-empty backbone");
    Ok((InteractionModel::new(InteractionConfig::default(), channels, rng)?, channels))
}

fn with_store(m: &InteractionModel, s: &ParamStore) -> InteractionModel {
    let mut m = m.clone();
    m.store = s.clone();
    m
}

type OpFn<'a> = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a>;

/// Every primitive on its own, contracted to a scalar.
fn op_cases(opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 4);
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| rand_tensor(rng, s);
    let w34 = r(&mut rng, &[3, 4]);
    let w34 = &w34;
    let w = move |g: &mut Graph, y: Var| contract(g, y, w34);
    let boxes = rand_boxes(&mut rng, 3);
    let ce_targets = [0usize, 3, 1];
    let (sl_t, sl_w) = (r(&mut rng, &[3, 4]), Tensor::ones(&[3, 4]));
    let mut focal_t = Tensor::zeros(&[3, 4]);
    focal_t.data_mut().iter_mut().step_by(3).for_each(|x| *x = 1.0);
    let conv_w = r(&mut rng, &[2, 6, 7]);
    let pool_w = r(&mut rng, &[3, 12]);
    let cases: Vec<(&'static str, Vec<Tensor>, OpFn<'_>)> = vec![
        ("matmul, transpose", vec![r(&mut rng, &[3, 5]), r(&mut rng, &[4, 5])], Box::new(move |g, v| {
            let t = g.transpose(v[1])?;
            let y = g.matmul(v[0], t)?;
            w(g, y)
        })),
        ("add, mul, scale (broadcast)", vec![r(&mut rng, &[3, 4]), r(&mut rng, &[1, 4])], Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let y = g.scale(m, -1.7)?;
            w(g, y)
        })),
        ("sigmoid, tanh, relu", vec![r(&mut rng, &[3, 4])], Box::new(move |g, v| {
            let a = g.sigmoid(v[0])?;
            let b = g.tanh(v[0])?;
            let c = g.relu(v[0])?;
            let y = g.mul(a, b)?;
            let y = g.add(y, c)?;
            w(g, y)
        })),
        ("softmax_rows", vec![r(&mut rng, &[3, 4])], Box::new(move |g, v| {
            let y = g.softmax_rows(v[0])?;
            w(g, y)
        })),
        ("normalize_rows", vec![r(&mut rng, &[3, 4])], Box::new(move |g, v| {
            let y = g.normalize_rows(v[0])?;
            w(g, y)
        })),
        ("sum, mean, reshape", vec![r(&mut rng, &[2, 6])], Box::new(move |g, v| {
            let a = g.reshape(v[0], &[3, 4])?;
            let a = g.mul(a, a)?;
            let m = g.mean(a)?;
            let s = g.sum(v[0])?;
            let s = g.mul(s, s)?;
            g.add(m, s)
        })),
        ("concat, slice, gather", vec![r(&mut rng, &[2, 4]), r(&mut rng, &[1, 4])], Box::new(move |g, v| {
            let c = g.concat_rows(&[v[0], v[1]])?;
            let gth = g.gather_rows(c, &[2, 0, 2])?;
            let s = g.slice_cols(gth, 1, 3)?;
            let s = g.mul(s, s)?;
            g.sum(s)
        })),
        ("conv2d", vec![r(&mut rng, &[3, 6, 7]), r(&mut rng, &[2, 3, 3, 3]), r(&mut rng, &[2])], Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            contract(g, y, &conv_w)
        })),
        ("roi_align, global_average_pool", vec![r(&mut rng, &[3, 12, 16])], Box::new(move |g, v| {
            let p = g.roi_align(v[0], &boxes, 2, 8.0)?;
            let y = contract(g, p, &pool_w)?;
            let gap = g.global_average_pool(v[0])?;
            let gap = g.mul(gap, gap)?;
            let gap = g.sum(gap)?;
            g.add(y, gap)
        })),
        ("cross_entropy", vec![r(&mut rng, &[3, 4])], Box::new(move |g, v| g.cross_entropy(v[0], &ce_targets))),
        ("smooth_l1", vec![r(&mut rng, &[3, 4])], Box::new(move |g, v| g.smooth_l1(v[0], &sl_t, &sl_w, 1.0 / 9.0, 3.0))),
        ("focal_loss", vec![r(&mut rng, &[3, 4])], Box::new(move |g, v| {
            let p = g.sigmoid(v[0])?;
            g.focal_loss(p, &focal_t, 0.25, 2.0)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_inputs(&inputs, |g, v| f(g, v), opts)?)))
        .collect()
}

fn scf_cases(opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = DetectionConfig::default();
    let channels = *cfg.backbone_channels.last().expect("non-empty backbone");
    let d = cfg.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let scf = ScfLayer::new(&mut store, "scf", channels, d, &mut rng)?;
    let f = rand_tensor(&mut rng, &[5, d]);
    let pooled: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[1, channels])).collect();
    let wts = rand_tensor(&mut rng, &[5, d]);
    let r = check_params(
        &store,
        |g, s| {
            let p: Vec<Var> = pooled.iter().map(|t| g.constant(t.clone())).collect();
            let fv = g.constant(f.clone());
            let y = scf.forward(g, s, &p, fv)?;
            contract(g, y, &wts)
        },
        opts,
    )?;
    Ok(vec![("context lstm + attention", r)])
}

fn sca_cases(opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = DetectionConfig::default();
    let d = cfg.feature_dim;
    let mut out = Vec::new();
    for (case, spatial) in [("spatial + visual weights", true), ("visual weights only", false)] {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 1);
        let mut store = ParamStore::new();
        let sca = ScaLayer::new(&mut store, "sca", d, cfg.spatial_hidden, spatial, &mut rng)?;
        let fk = rand_tensor(&mut rng, &[4, d]);
        let fr = rand_tensor(&mut rng, &[9, d]);
        let kb = rand_boxes(&mut rng, 4);
        let rb = rand_boxes(&mut rng, 9);
        let wts = rand_tensor(&mut rng, &[4, d]);
        let r = check_params(
            &store,
            |g, s| {
                let (a, b) = (g.constant(fk.clone()), g.constant(fr.clone()));
                let y = sca.forward(g, s, a, b, &kb, &rb, W, H)?;
                contract(g, y, &wts)
            },
            opts,
        )?;
        out.push((case, r));
    }
    Ok(out)
}

fn tg_cases(opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 2);
    let (m, channels) = interaction_model(&mut rng)?;
    let d = m.cfg.feature_dim;
    let (ib, tb) = (rand_boxes(&mut rng, 2), rand_boxes(&mut rng, 3));
    let se = |a: &[BoundingBox], b: &[BoundingBox]| -> Result<Tensor> { encode_pairs(a, b, W, H)?.reshaped(&[a.len() * b.len(), SPATIAL_DIM]) };
    let mut out = Vec::new();

    let key = rand_tensor(&mut rng, &[1, d]);
    let cands = rand_tensor(&mut rng, &[3, d]);
    let se_tw = se(&ib[..1], &tb)?;
    let w_tw = rand_tensor(&mut rng, &[1, 3]);
    let r = check_params(
        &m.store,
        |g, s| {
            let (k, c) = (g.constant(key.clone()), g.constant(cands.clone()));
            let y = with_store(&m, s).tw_head(g, k, c, &se_tw)?;
            contract(g, y, &w_tw)
        },
        opts,
    )?;
    out.push(("temporal weight head", r));

    let chain: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[1, d])).collect();
    let w_inter = rand_tensor(&mut rng, &[1, d]);
    let r = check_params(
        &m.store,
        |g, s| {
            let vars: Vec<Var> = chain.iter().map(|t| g.constant(t.clone())).collect();
            let y = with_store(&m, s).inter_passing(g, &vars)?;
            contract(g, y, &w_inter)
        },
        opts,
    )?;
    out.push(("inter-frame passing", r));

    let fi = rand_tensor(&mut rng, &[2, d]);
    let ft = rand_tensor(&mut rng, &[3, d]);
    let se_it = se(&ib, &tb)?;
    let (w_a, w_b) = (rand_tensor(&mut rng, &[2, d]), rand_tensor(&mut rng, &[3, d]));
    let r = check_params(
        &m.store,
        |g, s| {
            let mm = with_store(&m, s);
            let (a, b) = (g.constant(fi.clone()), g.constant(ft.clone()));
            let w = mm.intra_weights(g, a, b, &se_it)?;
            let (a, b) = mm.intra_passing(g, a, b, w)?;
            let x = contract(g, a, &w_a)?;
            let y = contract(g, b, &w_b)?;
            g.add(x, y)
        },
        opts,
    )?;
    out.push(("intra-frame passing", r));

    let map = rand_tensor(&mut rng, &[channels, 6, 8]);
    let w_s = rand_tensor(&mut rng, &[6, m.cfg.num_actions]);
    let r = check_params(
        &m.store,
        |g, s| {
            let (a, b, mv) = (g.constant(fi.clone()), g.constant(ft.clone()), g.constant(map.clone()));
            let y = with_store(&m, s).readout(g, a, b, &se_it, mv)?;
            contract(g, y, &w_s)
        },
        opts,
    )?;
    out.push(("readout", r));
    Ok(out)
}

fn loss_cases(opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = DetectionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed + 3);
    let gt = [
        Detection::new(Role::Instrument, 1, BoundingBox::new(10.0, 10.0, 40.0, 30.0), 1.0),
        Detection::new(Role::Tissue, 2, BoundingBox::new(60.0, 40.0, 100.0, 80.0), 1.0),
    ];
    let props = [
        BoundingBox::new(11.0, 9.0, 41.0, 31.0),
        BoundingBox::new(58.0, 42.0, 99.0, 79.0),
        BoundingBox::new(5.0, 60.0, 20.0, 90.0),
    ];
    let targets = assign_stage1_targets(&cfg, &props, &gt, 0.5);
    let k = cfg.num_classes();
    let inputs = [rand_tensor(&mut rng, &[3, k + 1]), rand_tensor(&mut rng, &[3, 4 * k])];
    let r1 = check_inputs(
        &inputs,
        |g, v| {
            let out = HeadOutput {
                logits: v[0],
                deltas: v[1],
                features: v[0],
            };
            stage1_loss(g, &out, &targets)
        },
        opts,
    )?;

    let a = InteractionConfig::default().num_actions;
    let logits = rand_tensor(&mut rng, &[6, a]);
    let mut t = Tensor::zeros(&[6, a]);
    t.data_mut().iter_mut().step_by(4).for_each(|x| *x = 1.0);
    let r2 = check_inputs(
        &[logits],
        |g, v| {
            let p = g.sigmoid(v[0])?;
            stage2_loss(g, p, &t, 0.25, 2.0)
        },
        opts,
    )?;
    Ok(vec![("detection loss", r1), ("focal action loss", r2)])
}

/// Runs one suite. `corrupt` biases every analytic gradient (harness check).
pub fn run(suite: Suite, corrupt: Option<f64>) -> Result<Vec<CaseResult>> {
    let opts = GradCheckOptions {
        max_coords: Some(COORDS),
        corrupt,
        ..Default::default()
    };
    let cases = match suite {
        Suite::Ops => op_cases(&opts)?,
        Suite::Scf => scf_cases(&opts)?,
        Suite::Sca => sca_cases(&opts)?,
        Suite::Tg => tg_cases(&opts)?,
        Suite::Loss => loss_cases(&opts)?,
    };
    Ok(cases.into_iter().map(|(case, report)| CaseResult { suite, case, report }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        for s in Suite::ALL {
            for c in run(s, None).unwrap() {
                assert!(c.passed(), "{} / {}: {:?}", s.name(), c.case, c.report);
            }
        }
    }

    #[test]
    fn corrupted_gradients_fail() {
        let r = run(Suite::Loss, Some(1e-2)).unwrap();
        assert!(r.iter().all(|c| !c.passed()));
    }

    #[test]
    fn names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(Suite::parse(s.name()), Some(s));
        }
        assert_eq!(Suite::parse("all"), None);
    }
}
