//! Analytic forward FLOP counts (2 FLOPs per multiply-add) and the
//! FLOP-balanced SSM block size.
//!
//! Only matmul-style multiply-adds are counted; softmax, normalization and
//! pointwise nonlinearities are excluded.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::router::{self, SplitMode};

/// Training iterations cost roughly three forward passes.
pub const TRAIN_FLOPS_MULTIPLIER: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopProfile {
    pub f_attn_per_token: f64,
    pub f_ssm_per_token: f64,
    pub block_size: usize,
}

impl FlopProfile {
    /// Branch costs with attention evaluated over the whole sequence of
    /// `seq_len` tokens, and the block size that balances them.
    pub fn new(config: &ModelConfig, seq_len: usize) -> Result<Self> {
        let f_attn = attn_flops_per_token(config, seq_len)?;
        let f_ssm = ssm_flops_per_token(config)?;
        let block_size = compute_block_size(seq_len, f_attn, f_ssm)?;
        Ok(Self { f_attn_per_token: f_attn, f_ssm_per_token: f_ssm, block_size })
    }

    /// Tokens routed to (SSM, attention) per block under `mode` for `seq_len` tokens.
    pub fn token_counts(&self, mode: SplitMode, seq_len: usize) -> (usize, usize) {
        match mode {
            SplitMode::NoSplit => (seq_len, seq_len),
            SplitMode::AESplit => (seq_len.div_ceil(2), seq_len / 2),
            SplitMode::FASplit | SplitMode::FACSplit => (self.block_size, seq_len - self.block_size),
        }
    }

    /// Predicted SSM share of branch work, in `[0, 1]`.
    pub fn ssm_share(&self, mode: SplitMode, seq_len: usize) -> f64 {
        let (n_s, n_a) = self.token_counts(mode, seq_len);
        let s = n_s as f64 * self.f_ssm_per_token;
        let a = n_a as f64 * self.f_attn_per_token;
        s / (s + a)
    }
}

pub fn attn_flops_per_token(config: &ModelConfig, context_len: usize) -> Result<f64> {
    config.validate()?;
    if context_len == 0 {
        return Err(Error::InvalidArgument("context_len must be at least 1".into()));
    }
    Ok(2.0 * config.attention_shape().macs_per_token(context_len) as f64)
}

pub fn ssm_flops_per_token(config: &ModelConfig) -> Result<f64> {
    config.validate()?;
    Ok(2.0 * config.ssm_shape().macs_per_token() as f64)
}

/// `clamp(round(L * F_a / (F_s + F_a)), 1, L - 1)`: the SSM token count that
/// equalizes `n_ssm * F_s` and `n_attn * F_a`.
pub fn compute_block_size(seq_len: usize, f_attn: f64, f_ssm: f64) -> Result<usize> {
    if seq_len < 2 {
        return Err(Error::Split(format!("split modes need L >= 2, got {seq_len}")));
    }
    if !(f_attn > 0.0 && f_ssm > 0.0 && f_attn.is_finite() && f_ssm.is_finite()) {
        return Err(Error::InvalidArgument(format!("FLOP costs must be positive, got {f_attn}, {f_ssm}")));
    }
    let raw = (seq_len as f64 * f_attn / (f_ssm + f_attn)).round();
    Ok((raw as usize).clamp(1, seq_len - 1))
}

/// Block size from a cost ratio `F_a / F_s`.
pub fn block_size_from_ratio(seq_len: usize, attn_to_ssm: f64) -> Result<usize> {
    compute_block_size(seq_len, attn_to_ssm, 1.0)
}

/// Average forward FLOPs per token of the whole model under its split mode
/// for sequences of `seq_len` tokens, including fusion, feed-forward and the
/// output head.
pub fn model_flops_per_token(config: &ModelConfig, seq_len: usize) -> Result<f64> {
    config.validate()?;
    let d = config.d_model as f64;
    let mode = config.split_mode;
    let branch = if mode.is_split() {
        let profile = FlopProfile::new(config, seq_len)?;
        let mut total = 0.0;
        for block in 0..config.n_blocks {
            let p = router::plan(mode, seq_len, block, profile.block_size)?;
            let n_s = p.ssm_indices.len() as f64;
            let n_a = p.attn_indices.len();
            total += n_s * profile.f_ssm_per_token + n_a as f64 * attn_flops_per_token(config, n_a)?;
        }
        total / (seq_len as f64 * config.n_blocks as f64)
    } else {
        attn_flops_per_token(config, seq_len)? + ssm_flops_per_token(config)?
    };
    let fusion = 2.0 * (2.0 * d * d);
    let ffn = if config.ffn { 2.0 * 2.0 * d * config.d_ffn() as f64 } else { 0.0 };
    let head = 2.0 * d * config.vocab_size as f64;
    Ok(config.n_blocks as f64 * (branch + fusion + ffn) + head)
}
