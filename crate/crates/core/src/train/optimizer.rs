//! Adam with decoupled weight decay, global-norm gradient clipping, and the
//! cosine-with-warmup learning-rate schedule.

use crate::model::Model;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment state, aligned with the model's parameter list.
#[derive(Clone, Debug)]
pub struct AdamW<S: Scalar> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: u64,
    pub weight_decay: f64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(model: &Model<S>, weight_decay: f64) -> Self {
        let m = model
            .params()
            .iter()
            .map(|p| vec![S::zero(); p.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            m,
            v,
            t: 0,
            weight_decay,
        }
    }

    /// One update over all parameters. `grads` must be aligned with
    /// `model.params()`. Decay applies only to matrices (`Param::decay`).
    pub fn step(&mut self, model: &mut Model<S>, grads: &[Vec<S>], lr: f64) {
        self.t += 1;
        let b1 = S::from_f64(BETA1);
        let b2 = S::from_f64(BETA2);
        let one = S::one();
        let eps = S::from_f64(ADAM_EPS);
        let corr1 = S::from_f64(1.0 - BETA1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - BETA2.powi(self.t as i32));
        let lr_s = S::from_f64(lr);
        for (idx, param) in model.params_mut().iter_mut().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if param.decay {
                S::from_f64(self.weight_decay)
            } else {
                S::zero()
            };
            let data = param.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / corr1;
                let v_hat = v[i] / corr2;
                data[i] = data[i] - lr_s * (m_hat / (v_hat.sqrt() + eps) + decay * data[i]);
            }
        }
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let x = v.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// Linear warmup into a cosine decay that bottoms out at
/// `base * floor_frac` and stays there past `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor_frac: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.base == 0.0 {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.base * (self.floor_frac + (1.0 - self.floor_frac) * cosine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            base: 1e-3,
            warmup_steps: 10,
            total_steps: 110,
            floor_frac: 0.1,
        };
        assert!(s.lr_at(0) < s.lr_at(9));
        assert!((s.lr_at(9) - 1e-3).abs() < 1e-12);
        assert!(s.lr_at(60) < s.lr_at(10));
        assert!((s.lr_at(110) - 1e-4).abs() < 1e-12);
        assert_eq!(s.lr_at(110), s.lr_at(500), "held at floor past the end");
    }

    #[test]
    fn clip_scales_only_when_needed() {
        let mut g = vec![vec![3.0f64, 4.0]];
        let norm = clip_global_norm(&mut g, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(g[0], vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = g[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
