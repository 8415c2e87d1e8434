//! Adam with bias correction and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }
}

/// Optimizer state; moments are indexed by parameter position.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        Adam {
            cfg,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }

    /// Applies one update for every parameter that has a gradient.
    ///
    /// Returns the gradient norm before clipping.
    pub fn update<'g>(&mut self, store: &mut ParamStore<T>, grads: impl IntoIterator<Item = (ParamId, &'g Tensor<T>)>) -> Result<f64>
    where
        T: 'g,
    {
        let grads: Vec<(ParamId, &Tensor<T>)> = grads.into_iter().collect();
        let mut sq = 0.0f64;
        for (id, g) in &grads {
            let e = store.entry(*id);
            if !e.trainable {
                continue;
            }
            if g.shape() != e.value.shape() {
                return Err(Error::ShapeConflict {
                    name: e.name.clone(),
                    expected: e.value.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            for &x in g.data() {
                let x = x.to_f64().unwrap_or(f64::NAN);
                if !x.is_finite() {
                    return Err(Error::Numeric {
                        op: "adam",
                        detail: format!("non-finite gradient for `{}`", e.name),
                    });
                }
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (lr, eps, s) = (T::of(c.lr), T::of(c.eps), T::of(scale));
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads {
            if !store.entry(id).trainable {
                continue;
            }
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape())).data_mut();
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape())).data_mut();
            let p = store.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g * s;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p = *p - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::zeros(&[2]);
        adam.update(&mut store, [(id, &g)]).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        let g = Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap();
        adam.update(&mut store, [(id, &g)]).unwrap();
        let p = store.get(id).data();
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9, "{p:?}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("enc.w", Tensor::zeros(&[1]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let err = adam.update(&mut store, [(id, &g)]).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }

    #[test]
    fn clipping_scales_to_max_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        let cfg = AdamConfig { clip_norm: 1.0, ..AdamConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        let g = Tensor::from_f64(&[2], &[30.0, 40.0]).unwrap();
        let norm = adam.update(&mut store, [(id, &g)]).unwrap();
        assert_eq!(norm, 50.0);
        let m = adam.m[0].as_ref().unwrap().data();
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-12 && (m[1] - 0.1 * 0.8).abs() < 1e-12);
    }
}
