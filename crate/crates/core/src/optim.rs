//! Adam and the warmup-plus-cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::quantizer::enforce_delta_floor;
use crate::reparam::enforce_alpha_floor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub base_lr: f64,
    pub refine_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            warmup_iters: 400,
            base_lr: 1e-3,
            refine_lr: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.total_iters {
            return Err(Error::Invalid(format!(
                "warmup {} exceeds total iterations {}",
                self.warmup_iters, self.total_iters
            )));
        }
        if !(self.base_lr > 0.0) || !(self.refine_lr > 0.0) {
            return Err(Error::Invalid("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Linear ramp from 0 over the warmup, then cosine decay to 0.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter >= self.total_iters {
            return Err(Error::Invalid(format!(
                "iteration {iter} outside schedule of {}",
                self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            return Ok(self.base_lr * iter as f64 / self.warmup_iters as f64);
        }
        let span = (self.total_iters - self.warmup_iters) as f64;
        let progress = (iter - self.warmup_iters) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }

    /// Learning rate for a parameter kind at `iter`.
    pub fn lr_for(&self, kind: ParamKind, iter: usize) -> Result<f64> {
        let lr = self.lr_at(iter)?;
        Ok(match kind {
            ParamKind::Refine => self.refine_lr * lr / self.base_lr,
            _ => lr,
        })
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction: `θ -= lr · m̂ / (√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    slots: Vec<Moments>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: sizes
                .into_iter()
                .map(|n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        Self::new(store.ids().map(|id| store.get(id).len()))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter; call once before the updates of a step.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    pub fn reset_slot(&mut self, slot: usize) {
        let s = &mut self.slots[slot];
        s.m.fill(0.0);
        s.v.fill(0.0);
    }

    pub fn update(&mut self, slot: usize, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        let t = self.step.max(1) as i32;
        let s = &mut self.slots[slot];
        if param.len() != s.m.len() || grad.len() != s.m.len() {
            return Err(Error::dim(format!("adam slot {slot} size mismatch")));
        }
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            s.m[i] = self.beta1 * s.m[i] + (1.0 - self.beta1) * g;
            s.v[i] = self.beta2 * s.v[i] + (1.0 - self.beta2) * g * g;
            let mh = s.m[i] / c1;
            let vh = s.v[i] / c2;
            param[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One step over every parameter with a gradient, then the positivity
    /// floors on step sizes and rescale factors. Gradients are cleared.
    pub fn step_store(
        &mut self,
        store: &mut ParamStore,
        lr: impl Fn(ParamKind) -> f64,
    ) -> Result<()> {
        self.tick();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let kind = store.kind(id);
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            self.update(id.index(), t.data_mut(), &g, lr(kind))?;
            t.zero_grad();
            match kind {
                ParamKind::QuantDelta => enforce_delta_floor(t.data_mut()),
                ParamKind::RescaleAlpha => enforce_alpha_floor(t.data_mut()),
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> TrainSchedule {
        TrainSchedule {
            total_iters: 100,
            warmup_iters: 20,
            ..TrainSchedule::default()
        }
    }

    #[test]
    fn warmup_then_cosine() {
        let s = sched();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert!((s.lr_at(20).unwrap() - 1e-3).abs() < 1e-15);
        assert!((s.lr_at(10).unwrap() - 5e-4).abs() < 1e-15);
        assert!(s.lr_at(99).unwrap() < 1e-6);
        assert!(s.lr_at(100).is_err());
    }

    #[test]
    fn refine_rate_follows_schedule() {
        let s = sched();
        let r = s.lr_for(ParamKind::Refine, 50).unwrap();
        let q = s.lr_for(ParamKind::QuantDelta, 50).unwrap();
        assert!((r / q - 0.1).abs() < 1e-12);
    }

    #[test]
    fn invalid_schedule() {
        let mut s = sched();
        s.warmup_iters = 200;
        assert!(s.validate().is_err());
        let mut s = sched();
        s.base_lr = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn single_step_closed_form() {
        for &g in &[0.3, -2.5, 1e-3, 42.0] {
            let mut adam = Adam::new([1]);
            adam.tick();
            let mut p = [1.0];
            adam.update(0, &mut p, &[g], 0.01).unwrap();
            let want = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - want).abs() < 1e-12, "g={g}: {} vs {want}", p[0]);
        }
    }

    #[test]
    fn floors_are_enforced() {
        use crate::tensor::Tensor;
        let mut store = ParamStore::new();
        let d = store.add("d", ParamKind::QuantDelta, Tensor::scalar(1e-9).with_requires_grad(true));
        let a = store.add("a", ParamKind::RescaleAlpha, Tensor::scalar(1e-7).with_requires_grad(true));
        store.get_mut(d).accumulate_grad(&[1.0]).unwrap();
        store.get_mut(a).accumulate_grad(&[1.0]).unwrap();
        let mut adam = Adam::for_store(&store);
        adam.step_store(&mut store, |_| 0.1).unwrap();
        assert_eq!(store.get(d).data()[0], crate::quantizer::DELTA_FLOOR);
        assert_eq!(store.get(a).data()[0], crate::reparam::ALPHA_FLOOR);
        assert!(store.get(d).grad().is_none());
    }
}
