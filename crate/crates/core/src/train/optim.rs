use std::f64::consts::PI;

use crate::error::{domain_error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub wd: (f64, f64),
    pub ema: (f64, f64),
}

/// Linear warmup to `base_lr` then cosine to 0; weight decay and EMA
/// momentum move linearly between their endpoints. `step` is clamped to
/// `total_steps`.
pub fn schedules(step: u64, cfg: &ScheduleConfig) -> Schedule {
    let total = cfg.total_steps.max(1);
    let s = step.min(total);
    let lr = if s < cfg.warmup_steps {
        cfg.base_lr * s as f64 / cfg.warmup_steps as f64
    } else if total == cfg.warmup_steps {
        cfg.base_lr
    } else {
        let p = (s - cfg.warmup_steps) as f64 / (total - cfg.warmup_steps) as f64;
        cfg.base_lr * 0.5 * (1.0 + (PI * p).cos())
    };
    let frac = s as f64 / total as f64;
    let lerp = |(a, b): (f64, f64)| a + (b - a) * frac;
    Schedule {
        lr,
        wd: lerp(cfg.wd),
        ema_m: lerp(cfg.ema),
    }
}

/// AdamW with bias-corrected moments and decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂+ε) + wd·p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        grads: &[Tensor<T>],
        lr: f64,
        wd: f64,
    ) -> Result<()> {
        let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(domain_error(
                "adamw",
                format!("{} params, {} grads, {} moment slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, wd, eps) = (T::lit(lr), T::lit(wd), T::lit(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(crate::error::shape_error("adamw", p.shape(), g.shape()));
            }
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pi);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig {
            base_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 100,
            wd: (0.04, 0.4),
            ema: (0.996, 1.0),
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        let s0 = schedules(0, &c);
        assert_eq!((s0.lr, s0.wd, s0.ema_m), (0.0, 0.04, 0.996));
        assert_eq!(schedules(10, &c).lr, 1e-3);
        let end = schedules(100, &c);
        assert!(end.lr.abs() < 1e-18);
        assert!((end.wd - 0.4).abs() < 1e-15 && end.ema_m == 1.0);
        // Continuous at the warmup/cosine boundary.
        let (a, b) = (schedules(9, &c).lr, schedules(11, &c).lr);
        assert!((a - 9e-4).abs() < 1e-15 && (1e-3 - b) < 1e-4);
    }

    proptest! {
        #[test]
        fn schedule_ranges(step in 0u64..200, warm in 0u64..50) {
            let c = ScheduleConfig { warmup_steps: warm, ..cfg() };
            let s = schedules(step, &c);
            prop_assert!((0.0..=1e-3).contains(&s.lr));
            prop_assert!((0.04..=0.4 + 1e-12).contains(&s.wd));
            prop_assert!((0.996..=1.0).contains(&s.ema_m));
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_a_fixed_point() {
        let mut p = vec![Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut opt = AdamW::<f64>::new(&p, 0.9, 0.95, 1e-8);
        opt.update(&mut p, &[Tensor::zeros(vec![3])], 0.1, 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut p = vec![Tensor::from_f64(vec![2], &[1.0, -3.0]).unwrap()];
        let mut opt = AdamW::<f64>::new(&p, 0.9, 0.95, 1e-8);
        opt.update(&mut p, &[Tensor::zeros(vec![2])], 0.1, 0.5).unwrap();
        for (got, want) in p[0].data().iter().zip([1.0 * (1.0 - 0.05), -3.0 * (1.0 - 0.05)]) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn lr_zero_leaves_parameters() {
        let mut p = vec![Tensor::from_f64(vec![2], &[1.0, -3.0]).unwrap()];
        let before = p.clone();
        let mut opt = AdamW::<f64>::new(&p, 0.9, 0.95, 1e-8);
        opt.update(&mut p, &[Tensor::from_f64(vec![2], &[5.0, 1.0]).unwrap()], 0.0, 0.4).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn quadratic_matches_scalar_simulation() {
        // Independent scalar re-derivation of the same recurrence.
        let c = ScheduleConfig {
            base_lr: 0.05,
            warmup_steps: 10,
            total_steps: 100,
            wd: (0.0, 0.0),
            ema: (1.0, 1.0),
        };
        let mut p = vec![Tensor::from_f64(vec![1], &[2.0]).unwrap()];
        let mut opt = AdamW::<f64>::new(&p, 0.9, 0.95, 1e-8);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        let mut prev = f64::INFINITY;
        for k in 0..100u64 {
            let lr = schedules(k, &c).lr;
            let g = 2.0 * p[0].data()[0];
            opt.update(&mut p, &[Tensor::from_f64(vec![1], &[g]).unwrap()], lr, 0.0).unwrap();
            let gs = 2.0 * x;
            m = 0.9 * m + 0.1 * gs;
            v = 0.95 * v + 0.05 * gs * gs;
            let t = (k + 1) as i32;
            x -= lr * ((m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.95f64.powi(t))).sqrt() + 1e-8));
            assert!((p[0].data()[0] - x).abs() < 1e-12);
            if k >= 10 {
                assert!(x.abs() < prev, "step {k}: |p| = {} not below {prev}", x.abs());
            }
            prev = x.abs();
        }
    }
}
