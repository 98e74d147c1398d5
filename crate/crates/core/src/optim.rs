//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::config::TrainConfig;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    /// One update of every trainable parameter that holds a gradient:
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let (lr_t, decay) = (T::lit(lr), T::lit(1.0 - lr * self.weight_decay));
        let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((w, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w = *w * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then cosine decay
/// to zero.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_frac: f64, total: usize) -> Self {
        let total = total.max(1);
        let warmup = ((warmup_frac * total as f64).ceil() as usize).min(total);
        Self { peak, warmup, total }
    }

    /// Learning rate of the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: Option<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full([3], v));
        s.get_mut(id).grad = g.map(|g| Tensor::full([3], g));
        s
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut s = store(0.7, Some(0.0));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..5 {
            opt.step(&mut s, 0.1);
        }
        assert!(s.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.7)));
    }

    #[test]
    fn first_step_hand_value() {
        let mut s = store(0.0, Some(1.0));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, 0.1);
        let want = -0.1 * (1.0 / (1.0 + 1e-8));
        for (_, p) in s.iter() {
            for &v in p.value.data() {
                assert!((v - want).abs() < 1e-15, "{v} vs {want}");
                assert!((v + 0.099_999_999_0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn decay_only_shrinks() {
        let mut s = store(2.0, Some(0.0));
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.1);
        opt.step(&mut s, 0.01);
        for (_, p) in s.iter() {
            assert!(p.value.data().iter().all(|&v| v == 2.0 * (1.0 - 0.01 * 0.1)));
        }
    }

    #[test]
    fn frozen_and_gradless_params_are_untouched() {
        let mut s = store(1.0, None);
        let id = s.add("frozen", Tensor::full([2], 1.0));
        s.get_mut(id).grad = Some(Tensor::full([2], 5.0));
        s.get_mut(id).trainable = false;
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut s, 0.1);
        assert!(s.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(1.0, 0.1, 100);
        assert_eq!(s.warmup, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert!(s.lr(99) > 0.0 && s.lr(99) < 1e-3);
        for i in 10..99 {
            assert!(s.lr(i + 1) <= s.lr(i));
        }
    }
}
