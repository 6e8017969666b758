use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::params::{ParamId, ParamMeta, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// One AdamW update of `param` in place. `t` is the 1-based step count
/// used for bias correction; decay is applied only when `decays` is set.
pub fn adamw_step<T: Real>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    moments: &mut Moments<T>,
    lr: f64,
    t: u64,
    decays: bool,
    hyper: &AdamWHyper,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != moments.m.shape() || param.shape() != moments.v.shape() {
        return Err(Error::shape(
            "adamw_step",
            format!(
                "param {:?}, grad {:?}, moments {:?}/{:?}",
                param.shape(),
                grad.shape(),
                moments.m.shape(),
                moments.v.shape()
            ),
        ));
    }
    if t == 0 {
        return Err(Error::invalid("adamw_step: step count starts at 1"));
    }
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(hyper.beta1), c(hyper.beta2));
    let (one_b1, one_b2) = (c(1.0 - hyper.beta1), c(1.0 - hyper.beta2));
    let corr1 = c(1.0 - hyper.beta1.powf(t as f64));
    let corr2 = c(1.0 - hyper.beta2.powf(t as f64));
    let lr_t = c(lr);
    let eps = c(hyper.eps);
    let shrink = if decays { c(1.0 - lr * hyper.weight_decay) } else { T::one() };
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + one_b1 * g;
        *v = b2 * *v + one_b2 * g * g;
        let update = (*m / corr1) / ((*v / corr2).sqrt() + eps);
        *p = *p * shrink - lr_t * update;
    }
    Ok(())
}

/// Optimizer state for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub hyper: AdamWHyper,
    pub moments: Vec<Moments<T>>,
    /// Completed updates.
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, hyper: AdamWHyper) -> Self {
        Self {
            hyper,
            moments: store.ids().map(|id| Moments::zeros(store.value(id).shape())).collect(),
            t: 0,
        }
    }

    /// Updates every parameter with a gradient; `lr` gives the rate of each
    /// group. Frozen parameters and parameters without gradient are left
    /// untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &BTreeMap<ParamId, Tensor<T>>,
        lr: impl Fn(&ParamMeta) -> f64,
    ) -> Result<()> {
        self.t += 1;
        for (&id, grad) in grads {
            if store.is_frozen(id) {
                continue;
            }
            let (rate, decays) = {
                let meta = store.meta(id);
                (lr(meta), meta.kind.decays())
            };
            adamw_step(
                store.value_mut(id),
                grad,
                &mut self.moments[id.0],
                rate,
                self.t,
                decays,
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Real>(grads: &BTreeMap<ParamId, Tensor<T>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<ParamId, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(x: &[f64]) -> Tensor<f64> {
        Tensor::new(x.to_vec(), &[x.len()]).unwrap()
    }

    #[test]
    fn update_examples() {
        let no_wd = AdamWHyper {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = t(&[1.0, -2.0]);
        let mut m = Moments::zeros(&[2]);
        adamw_step(&mut p, &t(&[0.0, 0.0]), &mut m, 0.1, 1, true, &no_wd).unwrap();
        assert_eq!(p, t(&[1.0, -2.0]));

        let wd = AdamWHyper {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut p = t(&[1.0]);
        let mut m = Moments::zeros(&[1]);
        adamw_step(&mut p, &t(&[0.0]), &mut m, 0.1, 1, true, &wd).unwrap();
        assert!((p.data()[0] - 0.999).abs() < 1e-15);
        let mut p = t(&[1.0]);
        adamw_step(&mut p, &t(&[0.0]), &mut Moments::zeros(&[1]), 0.1, 1, false, &wd).unwrap();
        assert_eq!(p.data()[0], 1.0);

        let mut p = t(&[0.5]);
        adamw_step(&mut p, &t(&[1.0]), &mut Moments::zeros(&[1]), 0.01, 1, false, &no_wd).unwrap();
        assert!((0.5 - p.data()[0] - 0.01).abs() < 1e-9);

        let mut p = t(&[0.5]);
        assert!(adamw_step(&mut p, &t(&[1.0, 2.0]), &mut Moments::zeros(&[1]), 0.01, 1, false, &no_wd).is_err());
    }

    #[test]
    fn clipping() {
        let mut grads = BTreeMap::new();
        grads.insert(ParamId(0), t(&[3.0]));
        grads.insert(ParamId(1), t(&[4.0]));
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        assert!((global_norm(&grads) - 1.0).abs() < 1e-12);
        assert_eq!(clip_grad_norm(&mut grads, 10.0), global_norm(&grads));
    }
}
