//! AdamW with a zero-gradient mask.
//!
//! Shared-weight training touches a different top-left slice of each tensor
//! on every step. Entries outside the active slice have exactly-zero
//! gradient, and updating them anyway would decay and drift weights that the
//! step never observed. The optimizer therefore skips every element whose
//! gradient is exactly zero: no moment update, no weight decay, no step.
//! Bias correction uses one global step counter so the effective rate does
//! not depend on how often a particular element was active.

use alloc::vec;
use alloc::vec::Vec;

use crate::backbone::ElasticParams;
use crate::scalar::Scalar;
use crate::tape::ParamTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamwSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamwSettings {
    fn default() -> Self {
        AdamwSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Masked AdamW over an ordered collection of tensors. Moment buffers are
/// allocated lazily on first sight of each tensor index and keyed by
/// position, so callers must present tensors in a stable order.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    pub settings: AdamwSettings,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(settings: AdamwSettings) -> Self {
        AdamW {
            settings,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Completed update count.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One optimizer step over `tensors`, in order, at learning rate `lr`.
    pub fn step(&mut self, tensors: &mut [&mut ParamTensor<T>], lr: f64) {
        self.step += 1;
        if self.moments.len() < tensors.len() {
            self.moments.resize(tensors.len(), None);
        }
        let b1 = T::lit(self.settings.beta1);
        let b2 = T::lit(self.settings.beta2);
        let one = T::one();
        let eps = T::lit(self.settings.eps);
        let wd = T::lit(self.settings.weight_decay);
        let lr = T::lit(lr);
        let c1 = T::lit(1.0 - libm::pow(self.settings.beta1, self.step as f64));
        let c2 = T::lit(1.0 - libm::pow(self.settings.beta2, self.step as f64));
        for (slot, p) in tensors.iter_mut().enumerate() {
            let n = p.numel();
            let (m, v) = self.moments[slot]
                .get_or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            debug_assert_eq!(m.len(), n, "tensor {slot} changed size");
            for i in 0..n {
                let g = p.grad[i];
                if g == T::zero() {
                    continue;
                }
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p.data[i] =
                    p.data[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p.data[i]);
            }
        }
    }

    /// Convenience wrapper for the backbone parameter store.
    pub fn step_model(&mut self, params: &mut ElasticParams<T>, lr: f64) {
        let mut tensors = params.tensors_mut();
        self.step(&mut tensors, lr);
    }
}

/// Linear warmup into cosine decay. `step` is 1-based; returns `peak` at the
/// end of warmup and `floor` at `total`.
pub fn warmup_cosine_lr(step: usize, total: usize, warmup: usize, peak: f64, floor: f64) -> f64 {
    if total == 0 {
        return peak;
    }
    let step = step.min(total);
    if warmup > 0 && step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    floor + 0.5 * (peak - floor) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(data: &[f64]) -> ParamTensor<f64> {
        let mut t = ParamTensor::zeros(1, data.len());
        t.data.copy_from_slice(data);
        t
    }

    #[test]
    fn zero_grad_elements_are_untouched() {
        let mut p = tensor(&[1.0, -2.0, 3.0]);
        p.grad = vec![0.5, 0.0, -0.25];
        let mut opt = AdamW::new(AdamwSettings::default());
        opt.step(&mut [&mut p], 1e-2);
        assert_ne!(p.data[0], 1.0);
        assert_eq!(p.data[1], -2.0, "masked element must not move or decay");
        assert_ne!(p.data[2], 3.0);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction, the first step is lr * (g/(|g|+eps') + wd*p)
        // where eps' = eps * sqrt(1-beta2).
        let s = AdamwSettings {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        };
        let mut p = tensor(&[2.0]);
        p.grad = vec![0.3];
        let mut opt = AdamW::new(s.clone());
        opt.step(&mut [&mut p], 0.01);
        let mhat = (1.0 - s.beta1) * 0.3 / (1.0 - s.beta1);
        let vhat = (1.0 - s.beta2) * 0.09 / (1.0 - s.beta2);
        let expect = 2.0 - 0.01 * (mhat / (vhat.sqrt() + s.eps) + s.weight_decay * 2.0);
        assert!((p.data[0] - expect).abs() < 1e-12, "{} vs {expect}", p.data[0]);
    }

    #[test]
    fn decoupled_decay_is_applied_only_with_nonzero_grad() {
        let s = AdamwSettings {
            weight_decay: 0.5,
            ..AdamwSettings::default()
        };
        let mut p = tensor(&[4.0, 4.0]);
        p.grad = vec![1e-12, 0.0];
        let mut opt = AdamW::new(s);
        opt.step(&mut [&mut p], 0.1);
        // Tiny but nonzero grad: decay applies (plus a near-unit Adam step).
        assert!(p.data[0] < 4.0 - 0.1 * 0.5 * 4.0 + 1e-6);
        assert_eq!(p.data[1], 4.0);
    }

    #[test]
    fn bias_correction_uses_global_step() {
        // Two tensors; the second participates only on the second step.
        // Its first update must use t=2 correction, identical to a fresh
        // element of the first tensor receiving its first nonzero grad then.
        let mut a = tensor(&[1.0, 1.0]);
        let mut b = tensor(&[1.0]);
        let mut opt = AdamW::new(AdamwSettings {
            weight_decay: 0.0,
            ..AdamwSettings::default()
        });
        a.grad = vec![0.2, 0.0];
        b.grad = vec![0.0];
        opt.step(&mut [&mut a, &mut b], 0.05);
        a.grad = vec![0.0, 0.2];
        b.grad = vec![0.2];
        opt.step(&mut [&mut a, &mut b], 0.05);
        assert_eq!(a.data[1], b.data[0]);
        assert_eq!(opt.steps_taken(), 2);
    }

    #[test]
    fn lr_schedule_endpoints_and_shape() {
        let total = 100;
        let warmup = 10;
        assert!((warmup_cosine_lr(1, total, warmup, 1.0, 0.1) - 0.1).abs() < 1e-12);
        assert!((warmup_cosine_lr(10, total, warmup, 1.0, 0.1) - 1.0).abs() < 1e-12);
        assert!((warmup_cosine_lr(100, total, warmup, 1.0, 0.1) - 0.1).abs() < 1e-12);
        let mid = warmup_cosine_lr(55, total, warmup, 1.0, 0.1);
        assert!((mid - 0.55).abs() < 1e-12, "cosine midpoint: {mid}");
        // Monotone decreasing after warmup.
        let mut prev = f64::INFINITY;
        for t in warmup..=total {
            let lr = warmup_cosine_lr(t, total, warmup, 1.0, 0.1);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
