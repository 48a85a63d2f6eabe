//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test hook: adds a bias to every analytic gradient entry.
    pub corrupt: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<(String, usize)>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn coords(len: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < len => {
            let mut v = sample(rng, len, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

fn eval_scalar(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::dim("gradcheck", "function must return a scalar"));
    }
    Ok(v.item())
}

/// Checks `f` with respect to free tensor inputs.
pub fn check_inputs<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval_at = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                g.leaf(t)
            })
            .collect();
        let out = f(&mut g, &vars)?;
        eval_scalar(&g, out)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for (i, t) in inputs.iter().enumerate() {
        for c in coords(t.len(), opts, &mut rng) {
            let numeric = (eval_at(i, c, opts.step)? - eval_at(i, c, -opts.step)?) / (2.0 * opts.step);
            let a = analytic[i].data()[c] + opts.corrupt.unwrap_or(0.0);
            let e = rel_error(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((format!("input{i}"), c));
            }
        }
    }
    Ok(report)
}

/// Checks `f` with respect to every trainable parameter in `store`.
pub fn check_params<F>(store: &ParamStore, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let mut with_grads = store.clone();
    with_grads.clear_grads();
    with_grads.accumulate_grads(&g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        if p.frozen {
            continue;
        }
        let analytic = with_grads
            .get(id)
            .grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        for c in coords(p.value.len(), opts, &mut rng) {
            let orig = p.value.data()[c];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(id).value.data_mut()[c] = x;
                let mut g = Graph::new();
                let out = f(&mut g, &probe)?;
                eval_scalar(&g, out)
            };
            let numeric = (at(orig + opts.step)? - at(orig - opts.step)?) / (2.0 * opts.step);
            probe.get_mut(id).value.data_mut()[c] = orig;
            let a = analytic.data()[c] + opts.corrupt.unwrap_or(0.0);
            let e = rel_error(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((p.name.clone(), c));
            }
        }
    }
    Ok(report)
}
