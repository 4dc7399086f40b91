//! AdamW and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::params::Parameters;
use crate::scalar::{lit, Scalar};
use crate::train::TrainConfig;

pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate for optimizer step `step`.
///
/// Linear ramp from 0 to `peak_lr` over `floor(warmup_fraction * total_steps)`
/// steps, then cosine decay to 0 at `total_steps`. Steps past the end clamp.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let warmup = (cfg.warmup_fraction * total as f64).floor() as usize;
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Weight decay applies to matrices and embeddings but not to biases, norm
/// gains or the SSM state parameters.
pub fn decays(name: &str, rank: usize) -> bool {
    rank >= 2 && !name.ends_with("a_log")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamWConfig {
    fn from(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: ADAM_EPS, weight_decay: cfg.weight_decay }
    }
}

/// AdamW with bias correction and decoupled weight decay. Moment buffers
/// are stored as module-shaped copies of the parameters.
#[derive(Clone, Debug)]
pub struct AdamW<M> {
    pub config: AdamWConfig,
    m: M,
    v: M,
    step: u64,
}

impl<M: Clone> AdamW<M> {
    pub fn new<T: Scalar>(params: &M, config: AdamWConfig) -> Self
    where
        M: Parameters<T>,
    {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&M, &M) {
        (&self.m, &self.v)
    }

    /// One update of `params` against `grads` at learning rate `lr`.
    pub fn update<T: Scalar>(&mut self, params: &mut M, grads: &M, lr: f64)
    where
        M: Parameters<T>,
    {
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (lit::<T>(beta1), lit::<T>(beta2));
        let (one, eps) = (T::one(), lit::<T>(eps));
        let step_size = lit::<T>(lr / c1);
        let c2_sqrt = lit::<T>(c2.sqrt());

        let tensors = params
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(self.m.params_mut())
            .zip(self.v.params_mut());
        for ((((name, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
            let decay = if decays(&name, p.ndim()) { lit::<T>(1.0 - lr * weight_decay) } else { one };
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p = *p * decay - step_size * *m / ((*v).sqrt() / c2_sqrt + eps);
            });
        }
    }
}
