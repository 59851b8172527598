use crate::error::{NdError, Result};
use crate::scalar::{fmt_shape, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.96,
            eps: 1e-8,
            weight_decay: 4.5e-2,
        }
    }
}

/// First/second moments for every parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One decoupled-weight-decay Adam update.
    ///
    /// `decay_mask[i] == false` exempts parameter `i` from weight decay.
    /// Refuses the whole update if any gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        decay_mask: &[bool],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || decay_mask.len() != params.len() {
            return Err(NdError::Contract(format!(
                "adamw: {} params, {} grads, {} moment slots, {} decay flags",
                params.len(),
                grads.len(),
                self.m.len(),
                decay_mask.len()
            )));
        }
        if lr < 0.0 {
            return Err(NdError::Contract(format!("adamw: negative learning rate {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(NdError::Dimension {
                    op: "adamw",
                    detail: format!(
                        "param {i}: {} vs grad {}",
                        fmt_shape(p.shape()),
                        fmt_shape(g.shape())
                    ),
                });
            }
            if !g.is_finite() {
                return Err(NdError::NonFinite { param: i });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if decay_mask[i] {
                T::from_f64_lossy(1.0 - lr * c.weight_decay)
            } else {
                one
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = b1 * *mj + (one - b1) * gj;
                *vj = b2 * *vj + (one - b2) * gj * gj;
                let denom = (*vj * inv_bc2).sqrt() + eps;
                *pj = *pj * decay - step_size * *mj / denom;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so their global L2 norm is at most `threshold`.
///
/// Returns `(factor, norm_before)`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], threshold: f64) -> (f64, f64) {
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > threshold && norm.is_finite() {
        let factor = threshold / norm;
        let f = T::from_f64_lossy(factor);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * f;
            }
        }
        (factor, norm)
    } else {
        (1.0, norm)
    }
}

/// Linear warmup followed by cosine decay to `floor`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub floor: f64,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64, floor: f64) -> Result<Self> {
        if warmup_steps > total_steps {
            return Err(NdError::Config(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
            floor,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        self.floor + 0.5 * (self.base_lr - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Stateless form of [`CosineSchedule::lr`] with a zero floor.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, warmup_steps: u64) -> Result<f64> {
    Ok(CosineSchedule::new(base_lr, warmup_steps, total_steps, 0.0)?.lr(step))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec())
    }

    #[test]
    fn zero_grads_zero_decay_leave_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut params = vec![tv(&[1.0, -2.0, 3.0])];
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[tv(&[0.0; 3])], &[true], 1e-3).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let g = [0.3, -2.0, 1e-3];
        let mut params = vec![tv(&[0.0; 3])];
        let mut opt = AdamW::new(cfg, &params);
        let lr = 0.01;
        opt.step(&mut params, &[tv(&g)], &[true], lr).unwrap();
        // closed form: m̂ = g, v̂ = g², update = -lr·g/(|g|+eps)
        for (p, gi) in params[0].data().iter().zip(&g) {
            let expect = -lr * gi / (gi.abs() + cfg.eps);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
            assert!((p + lr * gi.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_only_scales_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut params = vec![tv(&[2.0, -4.0])];
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[tv(&[0.0, 0.0])], &[true], 0.5).unwrap();
        assert_eq!(params[0].data(), &[2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn non_finite_grad_refused() {
        let mut params = vec![tv(&[1.0])];
        let mut opt = AdamW::new(AdamWConfig::default(), &params);
        let err = opt.step(&mut params, &[tv(&[f64::NAN])], &[true], 0.1).unwrap_err();
        assert_eq!(err, NdError::NonFinite { param: 0 });
        assert_eq!(params[0].data(), &[1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut params = vec![tv(&[0.1, 0.2, -0.3])];
            let mut opt = AdamW::<f64>::new(AdamWConfig::default(), &params);
            for i in 0..5 {
                let g = tv(&[0.01 * i as f64, -0.2, 0.5]);
                opt.step(&mut params, &[g], &[true], 1e-2).unwrap();
            }
            params[0].data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![tv(&[2.0, 0.0])];
        assert_eq!(clip_grad_norm(&mut g, 4.0).0, 1.0);
        let mut g = vec![tv(&[3.0, 4.0])];
        let (f, n) = clip_grad_norm(&mut g, 4.0);
        assert!((f - 0.8).abs() < 1e-15);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 2.4).abs() < 1e-12);
        assert!((g[0].data()[1] - 3.2).abs() < 1e-12);
        let mut g = vec![tv(&[0.0, 0.0])];
        assert_eq!(clip_grad_norm(&mut g, 4.0).0, 1.0);
        assert!(g[0].is_finite());
    }

    #[test]
    fn cosine_examples() {
        let s = CosineSchedule::new(1e-3, 10, 110, 0.0).unwrap();
        assert_eq!(s.lr(10), 1e-3);
        assert!(s.lr(110).abs() < 1e-18);
        let mid = 10 + 50;
        let direct = 0.5 * 1e-3 * (1.0 + (std::f64::consts::PI * 0.5).cos());
        assert!((s.lr(mid) - direct).abs() < 1e-18);
        assert!((s.lr(mid) - 0.5e-3).abs() < 1e-15);
        let s = CosineSchedule::new(1e-3, 0, 100, 1e-4).unwrap();
        assert!((s.lr(50) - 0.55e-3).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 5, 1e-3, 6), Err(NdError::Config(_))));
        assert!((s.lr(5) - cosine_lr(5, 100, 1e-3, 0).unwrap()).abs() < 2e-6);
    }
}
