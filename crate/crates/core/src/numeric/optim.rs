use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay folded into the velocity.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the joint gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if learning_rate.is_nan() || learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            clip_norm: None,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }

    /// `v <- mu v + g + lambda theta; theta <- theta - lr v`, then clears grads.
    /// With `clip_norm`, `g` is first scaled down jointly across parameters.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().filter(|&id| !store.get(id).frozen).collect();
        if let Some(&missing) = ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::MissingGrad {
                name: store.get(missing).name.clone(),
            });
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let sq: f64 = ids.iter().map(|&id| store.get(id).grad.as_ref().map_or(0.0, |g| g.data().iter().map(|x| x * x).sum())).sum();
                if sq.is_finite() && sq.sqrt() > c {
                    c / sq.sqrt()
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            if !grad.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for `{}`", p.name)));
            }
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            let (mu, wd, lr) = (self.momentum, self.weight_decay, self.learning_rate);
            for ((vv, &gv), th) in v.data_mut().iter_mut().zip(grad.data()).zip(p.value.data_mut()) {
                *vv = mu * *vv + scale * gv + wd * *th;
                *th -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: Vec<f64>, grad: Option<Vec<f64>>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = value.len();
        let id = s.insert("theta", Tensor::new(&[n], value).unwrap()).unwrap();
        s.get_mut(id).grad = grad.map(|g| Tensor::new(&[n], g).unwrap());
        (s, id)
    }

    #[test]
    fn plain_sgd_degeneration_is_exact() {
        let (mut s, id) = store_with(vec![1.0, -2.0, 0.5], Some(vec![0.3, 0.1, -0.7]));
        let mut opt = SgdMomentum::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut s).unwrap();
        let expected = [1.0 - 0.1 * 0.3, -2.0 - 0.1 * 0.1, 0.5 - 0.1 * -0.7];
        assert_eq!(s.get(id).value.data(), &expected);
        assert!(s.get(id).grad.is_none(), "grads are cleared after a step");
    }

    #[test]
    fn momentum_recurrence_two_steps() {
        let (mut s, id) = store_with(vec![0.0], Some(vec![2.0]));
        let mut opt = SgdMomentum::new(0.01, 0.9, 0.0).unwrap();
        opt.step(&mut s).unwrap();
        s.get_mut(id).grad = Some(Tensor::new(&[1], vec![2.0]).unwrap());
        opt.step(&mut s).unwrap();
        // v1 = g, v2 = 0.9 g + g = 1.9 g
        assert!((opt.velocity(id).unwrap().item() - 1.9 * 2.0).abs() < 1e-12);
        assert!((s.get(id).value.item() - -(0.01 * 2.0 + 0.01 * 3.8)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_norm_monotonically() {
        let (mut s, id) = store_with(vec![3.0, -4.0], None);
        let mut opt = SgdMomentum::new(0.05, 0.9, 0.01).unwrap();
        let mut last = s.get(id).value.norm_sq();
        for _ in 0..50 {
            s.zero_grads();
            opt.step(&mut s).unwrap();
            let now = s.get(id).value.norm_sq();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (mut s, _) = store_with(vec![1.0], None);
        let mut opt = SgdMomentum::new(0.1, 0.9, 0.0).unwrap();
        let err = opt.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("theta"), "{err}");
    }

    #[test]
    fn rejects_non_positive_rate() {
        assert!(SgdMomentum::new(0.0, 0.9, 0.0).is_err());
    }
}
