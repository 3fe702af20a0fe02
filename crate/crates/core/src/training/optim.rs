//! Decoupled-weight-decay Adam, global-norm clipping and the two-phase
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay, applied to tensors of rank >= 2 only.
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment estimates plus per-parameter step counts, so that
/// parameters which receive no gradient in some steps (planar mode) keep
/// consistent bias corrections.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: Vec<u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |id: ParamId| Tensor::zeros(store.get(id).shape());
        Self {
            config,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
            t: vec![0; store.len()],
        }
    }

    /// One update of every parameter listed in `grads`; parameters without a
    /// gradient are left untouched (including their decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f32) {
        let c = &self.config;
        for (id, grad) in grads {
            let i = id.index();
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - (c.beta1 as f64).powi(t);
            let bc2 = 1.0 - (c.beta2 as f64).powi(t);
            let decay = if store.get(*id).ndim() >= 2 { lr * c.weight_decay } else { 0.0 };
            let p = store.get_mut(*id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *p -= decay * *p;
                *p -= (lr as f64 * m_hat / (v_hat.sqrt() + c.eps as f64)) as f32;
            }
        }
    }
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f32) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

/// Cosine decay from `lr_start` to `lr_end` over the first `steps_3d` steps,
/// then constant `lr_end`.
pub fn learning_rate(step: usize, steps_3d: usize, lr_start: f64, lr_end: f64) -> f64 {
    if step >= steps_3d {
        return lr_end;
    }
    let progress = step as f64 / steps_3d as f64;
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(learning_rate(0, 100, 1e-4, 4.5e-6), 1e-4);
        assert!((learning_rate(100, 100, 1e-4, 4.5e-6) - 4.5e-6).abs() < 1e-9);
        assert_eq!(learning_rate(150, 100, 1e-4, 4.5e-6), 4.5e-6);
        assert!((learning_rate(50, 100, 1e-4, 0.0) - 5e-5).abs() < 1e-12);
        assert_eq!(learning_rate(3, 0, 1e-4, 1e-6), 1e-6);
    }

    proptest! {
        #[test]
        fn schedule_monotone(steps in 1usize..2000, a in 0usize..3000) {
            let (lo, hi) = (1e-6, 1e-3);
            let now = learning_rate(a, steps, hi, lo);
            let next = learning_rate(a + 1, steps, hi, lo);
            prop_assert!(next <= now + 1e-18);
            if a >= steps {
                prop_assert_eq!(now, lo);
            }
        }
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let grads = vec![(id, Tensor::from_vec(&[1, 2], vec![0.5, -2.0]).unwrap())];
        opt.step(&mut store, &grads, 0.1);
        let p = store.get(id).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn decay_is_decoupled_and_skips_vectors() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2, 2], 2.0));
        let b = store.add("b", Tensor::full(&[2], 2.0));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() }, &store);
        let grads = vec![(w, Tensor::zeros(&[2, 2])), (b, Tensor::zeros(&[2]))];
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get(w).data()[0] - 1.9).abs() < 1e-6);
        assert_eq!(store.get(b).data()[0], 2.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[2]));
        let mut grads = vec![(id, Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap())];
        assert_eq!(clip_global_norm(&mut grads, 1.0), 5.0);
        assert!((grads[0].1.sq_norm() - 1.0).abs() < 1e-6);
        let mut small = vec![(id, Tensor::from_vec(&[2], vec![0.3, 0.4]).unwrap())];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].1.data(), &[0.3, 0.4]);
    }
}
