//! Training loop: gradient accumulation, clipping, AdamW and metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bench::mfu_from_tokens;
use crate::data::Batcher;
use crate::error::{Error, Result};
use crate::flops::{model_flops_per_token, TRAIN_FLOPS_MULTIPLIER};
use crate::lanes::Lanes;
use crate::model::LanguageModel;
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::params::Parameters;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    /// Applied optimizer steps.
    pub total_steps: usize,
    /// Windows per micro-batch.
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Save a checkpoint every this many applied steps (the final step is
    /// always saved); 0 saves only the final step.
    pub checkpoint_every: usize,
    /// Fraction of windows held out for evaluation.
    pub eval_fraction: f64,
    /// Declared device peak FLOP/s; MFU is reported only when set.
    pub peak_flops: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            warmup_fraction: 0.10,
            total_steps: 2000,
            batch_size: 16,
            grad_accum: 8,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 500,
            eval_fraction: 0.05,
            peak_flops: None,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            v.push(format!("train.peak_lr must be positive, got {}", self.peak_lr));
        }
        if !open_unit(self.beta1) {
            v.push(format!("train.beta1 must be in (0, 1), got {}", self.beta1));
        }
        if !open_unit(self.beta2) {
            v.push(format!("train.beta2 must be in (0, 1), got {}", self.beta2));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !open_unit(self.warmup_fraction) {
            v.push(format!("train.warmup_fraction must be in (0, 1), got {}", self.warmup_fraction));
        }
        if self.total_steps == 0 {
            v.push("train.total_steps must be positive".into());
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be positive".into());
        }
        if self.grad_accum == 0 {
            v.push("train.grad_accum must be positive".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            v.push(format!("train.grad_clip must be non-negative, got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            v.push(format!("train.eval_fraction must be in [0, 1), got {}", self.eval_fraction));
        }
        if let Some(p) = self.peak_flops {
            if !(p.is_finite() && p > 0.0) {
                v.push(format!("train.peak_flops must be positive, got {p}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn tokens_per_step(&self, seq_len: usize) -> usize {
        self.batch_size * self.grad_accum * seq_len
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub tokens_seen: u64,
    pub wall_ms: f64,
    pub tps: f64,
    pub mfu: Option<f64>,
}

/// Result of feeding one micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MicroStep {
    pub loss: f64,
    /// Present when this micro-batch completed an accumulation cycle.
    pub applied: Option<StepMetrics>,
}

pub struct Trainer<T: Scalar = f32> {
    model: LanguageModel<T>,
    cfg: TrainConfig,
    opt: AdamW<LanguageModel<T>>,
    accum: LanguageModel<T>,
    micro: usize,
    micro_loss_sum: f64,
    tokens_seen: u64,
    cycle_tokens: u64,
    cycle_start: Option<Instant>,
    flops_per_token: f64,
    lanes: Lanes,
    last_grad_norm: f64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: LanguageModel<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let flops_per_token =
            TRAIN_FLOPS_MULTIPLIER * model_flops_per_token(model.config(), model.config().seq_len)?;
        let lanes = Lanes::new(model.config().exec_mode);
        Ok(Self {
            opt: AdamW::new(&model, AdamWConfig::from(&cfg)),
            accum: model.zeros_like(),
            model,
            cfg,
            micro: 0,
            micro_loss_sum: 0.0,
            tokens_seen: 0,
            cycle_tokens: 0,
            cycle_start: None,
            flops_per_token,
            lanes,
            last_grad_norm: 0.0,
        })
    }

    pub fn model(&self) -> &LanguageModel<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Applied optimizer steps so far.
    pub fn step(&self) -> usize {
        self.opt.step() as usize
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    /// Global gradient norm of the most recent applied step, before clipping.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    pub fn into_model(self) -> LanguageModel<T> {
        self.model
    }

    /// Forward and backward on one micro-batch of windows. Gradients are
    /// accumulated; every `grad_accum` micro-batches they are clipped and
    /// applied.
    pub fn train_step(&mut self, batch: &[&[usize]]) -> Result<MicroStep> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty micro-batch".into()));
        }
        self.cycle_start.get_or_insert_with(Instant::now);
        let weight = lit::<T>(1.0 / (batch.len() * self.cfg.grad_accum) as f64);
        let mut loss_sum = 0.0;
        for window in batch {
            let (loss, grad) = self.model.loss_and_grad(window, &self.lanes)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                let tensor = grad
                    .first_non_finite()
                    .or_else(|| self.model.first_non_finite())
                    .unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite { tensor });
            }
            loss_sum += loss;
            self.accum.add_scaled(&grad, weight);
            self.cycle_tokens += (window.len() - 1) as u64;
        }
        let loss = loss_sum / batch.len() as f64;
        self.micro_loss_sum += loss;
        self.micro += 1;

        let applied = if self.micro == self.cfg.grad_accum { Some(self.apply()?) } else { None };
        Ok(MicroStep { loss, applied })
    }

    fn apply(&mut self) -> Result<StepMetrics> {
        if let Some(tensor) = self.accum.first_non_finite() {
            return Err(Error::NonFinite { tensor: format!("grad.{tensor}") });
        }
        let norm = self.accum.sum_squares().to_f64_lossy().sqrt();
        self.last_grad_norm = norm;
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.accum.scale(lit(self.cfg.grad_clip / norm));
        }
        let step = self.step() + 1;
        let lr = lr_at(step, &self.cfg);
        self.opt.update(&mut self.model, &self.accum, lr);
        self.accum.fill_zero();

        let loss = self.micro_loss_sum / self.micro as f64;
        self.micro = 0;
        self.micro_loss_sum = 0.0;
        self.tokens_seen += self.cycle_tokens;
        let wall = self.cycle_start.take().map_or(0.0, |t| t.elapsed().as_secs_f64());
        let tps = if wall > 0.0 { self.cycle_tokens as f64 / wall } else { 0.0 };
        self.cycle_tokens = 0;
        let mfu = match self.cfg.peak_flops {
            Some(peak) => Some(mfu_from_tokens(tps, self.flops_per_token, peak)?),
            None => None,
        };
        Ok(StepMetrics { step, loss, lr, tokens_seen: self.tokens_seen, wall_ms: wall * 1e3, tps, mfu })
    }

    /// Runs until `total_steps` applied steps, drawing micro-batches from
    /// `windows` in seeded shuffled order. `on_step` sees every applied step.
    pub fn fit<F>(&mut self, windows: &[Vec<usize>], mut on_step: F) -> Result<Vec<StepMetrics>>
    where
        F: FnMut(&StepMetrics, &Self) -> Result<()>,
    {
        let mut batcher = Batcher::new(windows.len(), self.cfg.seed)?;
        let mut history = Vec::with_capacity(self.cfg.total_steps);
        while self.step() < self.cfg.total_steps {
            let idx = batcher.next_batch(self.cfg.batch_size);
            let batch: Vec<&[usize]> = idx.iter().map(|&i| windows[i].as_slice()).collect();
            if let Some(m) = self.train_step(&batch)?.applied {
                on_step(&m, self)?;
                history.push(m);
            }
        }
        Ok(history)
    }
}

/// Mean per-token loss of `model` over `windows`.
pub fn evaluate<T: Scalar>(model: &LanguageModel<T>, windows: &[Vec<usize>], lanes: &Lanes) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Corpus("no evaluation windows".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let n = w.len() - 1;
        total += model.window_loss(w, lanes)?.to_f64_lossy() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::lanes::ExecMode;
    use crate::router::SplitMode;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            d_inner: 8,
            d_state: 4,
            n_blocks: 2,
            seq_len: 8,
            split_mode: SplitMode::FACSplit,
            exec_mode: ExecMode::Serial,
            ..Default::default()
        }
    }

    fn windows(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (0..9).map(|j| (i * 3 + j * j) % 13).collect()).collect()
    }

    fn cfg(batch: usize, accum: usize) -> TrainConfig {
        TrainConfig { total_steps: 10, batch_size: batch, grad_accum: accum, grad_clip: 0.0, peak_lr: 1e-2, ..Default::default() }
    }

    #[test]
    fn defaults_match_recipe() {
        let c = TrainConfig::default();
        assert_eq!((c.peak_lr, c.beta1, c.beta2, c.weight_decay, c.grad_accum), (3e-4, 0.9, 0.95, 0.1, 8));
        assert_eq!(c.warmup_fraction, 0.10);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn violations_are_all_listed() {
        let c = TrainConfig { beta1: 1.0, batch_size: 0, warmup_fraction: 0.0, ..Default::default() };
        let v = c.violations();
        assert_eq!(v.len(), 3, "{v:?}");
    }

    #[test]
    fn parameters_change_only_on_boundaries() {
        let model = LanguageModel::<f64>::new(tiny()).unwrap();
        let data = windows(6);
        let mut t = Trainer::new(model.clone(), cfg(1, 3)).unwrap();
        let first = t.train_step(&[&data[0]]).unwrap();
        let fresh = model.window_loss(&data[0], &Lanes::new(ExecMode::Serial)).unwrap();
        assert_eq!(first.loss, fresh);
        assert!(first.applied.is_none());
        assert_eq!(t.model(), &model);
        assert!(t.train_step(&[&data[1]]).unwrap().applied.is_none());
        assert_eq!(t.model(), &model);
        let third = t.train_step(&[&data[2]]).unwrap();
        let m = third.applied.unwrap();
        assert_eq!(m.step, 1);
        assert_eq!(m.tokens_seen, 24);
        assert_ne!(t.model(), &model);
        assert_eq!(t.step(), 1);
    }

    #[test]
    fn accumulation_matches_large_batch() {
        let model = LanguageModel::<f64>::new(tiny()).unwrap();
        let data = windows(4);
        let refs: Vec<&[usize]> = data.iter().map(|w| w.as_slice()).collect();

        let mut big = Trainer::new(model.clone(), cfg(4, 1)).unwrap();
        let big_metrics = big.train_step(&refs).unwrap().applied.unwrap();

        let mut small = Trainer::new(model, cfg(2, 2)).unwrap();
        small.train_step(&refs[..2]).unwrap();
        let small_metrics = small.train_step(&refs[2..]).unwrap().applied.unwrap();

        assert!((big.last_grad_norm() - small.last_grad_norm()).abs() <= 1e-6 * big.last_grad_norm());
        assert!((big_metrics.loss - small_metrics.loss).abs() < 1e-12);
        for ((name, a), (_, b)) in big.model().params().into_iter().zip(small.model().params()) {
            let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-6, "{name}: {diff}");
        }
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let model = LanguageModel::<f64>::new(tiny()).unwrap();
        let data = windows(2);
        let c = TrainConfig { grad_clip: 1e-3, ..cfg(2, 1) };
        let mut t = Trainer::new(model, c).unwrap();
        let refs: Vec<&[usize]> = data.iter().map(|w| w.as_slice()).collect();
        t.train_step(&refs).unwrap();
        assert!(t.last_grad_norm() > 1e-3);
    }

    #[test]
    fn fit_runs_exact_step_count_and_is_reproducible() {
        let data = windows(5);
        let run = || {
            let model = LanguageModel::<f32>::new(tiny()).unwrap();
            let mut t = Trainer::new(model, cfg(2, 2)).unwrap();
            let mut seen = 0;
            let hist = t
                .fit(&data, |_, _| {
                    seen += 1;
                    Ok(())
                })
                .unwrap();
            assert_eq!(seen, 10);
            (hist.iter().map(|m| m.loss).collect::<Vec<_>>(), t.into_model())
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(a.last().unwrap() < a.first().unwrap());
    }

    #[test]
    fn non_finite_loss_names_a_tensor() {
        let mut model = LanguageModel::<f64>::new(tiny()).unwrap();
        model.norm_f.gain[0] = f64::NAN;
        let data = windows(1);
        let mut t = Trainer::new(model, cfg(1, 1)).unwrap();
        match t.train_step(&[&data[0]]) {
            Err(Error::NonFinite { tensor }) => assert!(!tensor.is_empty(), "{tensor}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_is_token_weighted_mean() {
        let model = LanguageModel::<f64>::new(tiny()).unwrap();
        let data = windows(3);
        let lanes = Lanes::new(ExecMode::Serial);
        let expected = data.iter().map(|w| model.window_loss(w, &lanes).unwrap()).sum::<f64>() / 3.0;
        assert!((evaluate(&model, &data, &lanes).unwrap() - expected).abs() < 1e-12);
    }
}
