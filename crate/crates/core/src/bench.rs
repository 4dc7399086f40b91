//! Throughput measurement and model FLOPs utilization.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flops::{model_flops_per_token, TRAIN_FLOPS_MULTIPLIER};
use crate::lanes::{ExecMode, Lanes};
use crate::model::LanguageModel;
use crate::router::SplitMode;

/// Coefficient of variation above which a report is flagged unreliable.
pub const MAX_RELIABLE_CV: f64 = 0.10;

fn check_peak(peak: f64) -> Result<()> {
    if peak.is_finite() && peak > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("device peak FLOP/s must be positive, got {peak}")))
    }
}

/// `flops_per_iter * iters_per_sec / peak`.
pub fn mfu(flops_per_iter: f64, iters_per_sec: f64, device_peak: f64) -> Result<f64> {
    check_peak(device_peak)?;
    Ok(flops_per_iter * iters_per_sec / device_peak)
}

/// `tokens_per_sec * flops_per_token / peak`.
pub fn mfu_from_tokens(tokens_per_sec: f64, flops_per_token: f64, device_peak: f64) -> Result<f64> {
    check_peak(device_peak)?;
    Ok(tokens_per_sec * flops_per_token / device_peak)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchBusy {
    pub ssm: f64,
    pub attn: f64,
}

/// Training-throughput measurement for one (split mode, exec mode) pair.
/// Timings are per forward+backward iteration; FLOPs use the 3x forward
/// convention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub mode: SplitMode,
    pub exec_mode: ExecMode,
    pub tokens_per_iter: usize,
    pub tokens_per_sec: f64,
    pub flops_per_iter: f64,
    pub iters_per_sec: f64,
    pub flops_per_token: f64,
    pub device_peak_flops: f64,
    pub mfu: f64,
    pub branch_busy_ms: BranchBusy,
    pub idle_ms: f64,
    pub median_iter_ms: f64,
    pub cv: f64,
    pub reliable: bool,
}

impl ThroughputReport {
    /// Idle lane time as a share of the two lanes' capacity per iteration.
    pub fn idle_pct(&self) -> f64 {
        if self.median_iter_ms > 0.0 {
            100.0 * self.idle_ms / (2.0 * self.median_iter_ms)
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOptions {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    /// Sequences per iteration.
    pub batch_size: usize,
    pub peak_flops: f64,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { warmup_iters: 5, timed_iters: 20, batch_size: 1, peak_flops: 1e11, seed: 0 }
    }
}

impl BenchOptions {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.warmup_iters == 0 {
            v.push("bench.warmup_iters must be at least 1".into());
        }
        if self.timed_iters == 0 {
            v.push("bench.timed_iters must be positive".into());
        }
        if self.batch_size == 0 {
            v.push("bench.batch_size must be positive".into());
        }
        if !(self.peak_flops.is_finite() && self.peak_flops > 0.0) {
            v.push(format!("bench.peak_flops must be positive, got {}", self.peak_flops));
        }
        v
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn coefficient_of_variation(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    if mean > 0.0 {
        var.sqrt() / mean
    } else {
        0.0
    }
}

/// Times forward+backward iterations of a freshly initialized model on a
/// synthetic batch.
pub fn measure(config: &ModelConfig, mode: SplitMode, exec: ExecMode, opts: &BenchOptions) -> Result<ThroughputReport> {
    let v = opts.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let config = config.clone().with_split_mode(mode).with_exec_mode(exec);
    let model = LanguageModel::<f32>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch: Vec<Vec<usize>> = (0..opts.batch_size)
        .map(|_| (0..=config.seq_len).map(|_| rng.random_range(0..config.vocab_size)).collect())
        .collect();
    let lanes = Lanes::timed(exec);
    let iterate = || -> Result<()> {
        for w in &batch {
            std::hint::black_box(model.loss_and_grad(w, &lanes)?);
        }
        Ok(())
    };
    for _ in 0..opts.warmup_iters {
        iterate()?;
    }
    lanes.reset();
    let mut times = Vec::with_capacity(opts.timed_iters);
    for _ in 0..opts.timed_iters {
        let t = Instant::now();
        iterate()?;
        times.push(t.elapsed().as_secs_f64());
    }
    let lane = lanes.times();
    let per_iter = |ms: f64| ms / opts.timed_iters as f64;

    let iter_secs = median(&times);
    let tokens_per_iter = opts.batch_size * config.seq_len;
    let flops_per_token = TRAIN_FLOPS_MULTIPLIER * model_flops_per_token(&config, config.seq_len)?;
    let flops_per_iter = flops_per_token * tokens_per_iter as f64;
    let iters_per_sec = 1.0 / iter_secs;
    let cv = coefficient_of_variation(&times);
    Ok(ThroughputReport {
        mode,
        exec_mode: exec,
        tokens_per_iter,
        tokens_per_sec: tokens_per_iter as f64 * iters_per_sec,
        flops_per_iter,
        iters_per_sec,
        flops_per_token,
        device_peak_flops: opts.peak_flops,
        mfu: mfu(flops_per_iter, iters_per_sec, opts.peak_flops)?,
        branch_busy_ms: BranchBusy { ssm: per_iter(lane.ssm_busy_ms), attn: per_iter(lane.attn_busy_ms) },
        idle_ms: per_iter(lane.idle_ms),
        median_iter_ms: iter_secs * 1e3,
        cv,
        reliable: cv <= MAX_RELIABLE_CV,
    })
}

pub const CSV_COLUMNS: [&str; 14] = [
    "mode",
    "exec_mode",
    "tokens_per_iter",
    "tokens_per_sec",
    "iters_per_sec",
    "flops_per_iter",
    "flops_per_token",
    "device_peak_flops",
    "mfu",
    "ssm_busy_ms",
    "attn_busy_ms",
    "idle_ms",
    "idle_pct",
    "reliable",
];

/// Comparison table of reports: aligned text for terminals and CSV with the
/// columns in [`CSV_COLUMNS`] order.
pub fn report_table(reports: &[ThroughputReport]) -> Result<(String, String)> {
    let mut text = format!(
        "{:<10} {:<9} {:>12} {:>8} {:>7} {:>10} {:>10} {:>9}\n",
        "mode", "exec", "tokens/s", "MFU%", "idle%", "ssm_ms", "attn_ms", "reliable"
    );
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record(CSV_COLUMNS).map_err(csv_error)?;
    for r in reports {
        let _ = writeln!(
            text,
            "{:<10} {:<9} {:>12.1} {:>8.3} {:>7.1} {:>10.3} {:>10.3} {:>9}",
            r.mode.name(),
            r.exec_mode,
            r.tokens_per_sec,
            100.0 * r.mfu,
            r.idle_pct(),
            r.branch_busy_ms.ssm,
            r.branch_busy_ms.attn,
            if r.reliable { "yes" } else { "no" }
        );
        csv.write_record([
            r.mode.name().to_string(),
            r.exec_mode.to_string(),
            r.tokens_per_iter.to_string(),
            r.tokens_per_sec.to_string(),
            r.iters_per_sec.to_string(),
            r.flops_per_iter.to_string(),
            r.flops_per_token.to_string(),
            r.device_peak_flops.to_string(),
            r.mfu.to_string(),
            r.branch_busy_ms.ssm.to_string(),
            r.branch_busy_ms.attn.to_string(),
            r.idle_ms.to_string(),
            r.idle_pct().to_string(),
            r.reliable.to_string(),
        ])
        .map_err(csv_error)?;
    }
    let bytes = csv.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let csv = String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok((text, csv))
}

fn csv_error(e: csv::Error) -> Error {
    Error::InvalidArgument(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturation_is_one() {
        assert_eq!(mfu(2e12, 0.5, 1e12).unwrap(), 1.0);
    }

    #[test]
    fn zero_or_negative_peak_rejected() {
        assert!(mfu(1.0, 1.0, 0.0).is_err());
        assert!(mfu(1.0, 1.0, -5.0).is_err());
        assert!(mfu_from_tokens(1.0, 1.0, 0.0).is_err());
        assert!(mfu(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn published_throughput_reconciles() {
        let flops_per_iter = 19.24e12;
        let tokens_per_iter = 131_072.0;
        let tps = 14_385.0;
        let ips = tps / tokens_per_iter;
        let peak = 7.93e12;
        let a = mfu(flops_per_iter, ips, peak).unwrap();
        let b = mfu_from_tokens(tps, flops_per_iter / tokens_per_iter, peak).unwrap();
        assert!((a - 0.2664).abs() < 1e-3, "{a}");
        assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn median_and_cv() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(coefficient_of_variation(&[2.0, 2.0, 2.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_table_is_header_only() {
        let (text, csv) = report_table(&[]).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(csv, format!("{}\n", CSV_COLUMNS.join(",")));
    }

    #[test]
    fn bench_options_validation() {
        let o = BenchOptions { warmup_iters: 0, peak_flops: 0.0, ..Default::default() };
        assert_eq!(o.violations().len(), 2);
    }

    #[test]
    fn measure_small_model() {
        let cfg = ModelConfig {
            vocab_size: 32,
            d_model: 8,
            n_heads: 2,
            d_inner: 8,
            d_state: 4,
            n_blocks: 2,
            seq_len: 16,
            ..Default::default()
        };
        let opts = BenchOptions { warmup_iters: 1, timed_iters: 3, batch_size: 2, peak_flops: 1e12, seed: 1 };
        let r = measure(&cfg, SplitMode::FACSplit, ExecMode::Serial, &opts).unwrap();
        assert_eq!(r.tokens_per_iter, 32);
        assert!(r.tokens_per_sec > 0.0);
        let second = mfu_from_tokens(r.tokens_per_sec, r.flops_per_token, r.device_peak_flops).unwrap();
        assert!((r.mfu - second).abs() <= 1e-9 * r.mfu);
        assert!(r.branch_busy_ms.ssm > 0.0 && r.branch_busy_ms.attn > 0.0);
    }
}
