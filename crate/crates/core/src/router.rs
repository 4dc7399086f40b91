//! Token routing between the SSM and attention branches of a parallel block.
//!
//! Four strategies are supported:
//!
//! * `NoSplit`: both branches see every position.
//! * `AESplit`: contiguous halves that swap owners on every block.
//! * `FASplit`: a static FLOP-balanced prefix goes to the SSM branch.
//! * `FACSplit`: a FLOP-balanced window of `block_size` positions that
//!   advances by `block_size` per block and wraps around the sequence end.
//!
//! In every split mode the two index lists partition `0..L` and stay in
//! ascending (original) order.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum SplitMode {
    #[default]
    NoSplit,
    AESplit,
    FASplit,
    FACSplit,
}

impl SplitMode {
    pub const ALL: [SplitMode; 4] = [SplitMode::NoSplit, SplitMode::AESplit, SplitMode::FASplit, SplitMode::FACSplit];

    pub fn name(self) -> &'static str {
        match self {
            SplitMode::NoSplit => "NoSplit",
            SplitMode::AESplit => "AESplit",
            SplitMode::FASplit => "FASplit",
            SplitMode::FACSplit => "FACSplit",
        }
    }

    pub fn is_split(self) -> bool {
        self != SplitMode::NoSplit
    }

    /// FA and FAC need a FLOP-derived block size.
    pub fn uses_block_size(self) -> bool {
        matches!(self, SplitMode::FASplit | SplitMode::FACSplit)
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    /// Accepts the canonical names as well as the short CLI spellings
    /// (`no_split`, `ae`, `fa`, `fac`), case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
        match key.as_str() {
            "nosplit" | "none" => Ok(SplitMode::NoSplit),
            "ae" | "aesplit" => Ok(SplitMode::AESplit),
            "fa" | "fasplit" => Ok(SplitMode::FASplit),
            "fac" | "facsplit" => Ok(SplitMode::FACSplit),
            _ => Err(Error::InvalidArgument(format!(
                "unknown split mode {s:?} (expected one of no_split, ae, fa, fac)"
            ))),
        }
    }
}

/// Serialized as the canonical name; any spelling accepted by `FromStr`
/// deserializes.
impl Serialize for SplitMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for SplitMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// Assignment of token positions to the two branches for one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub block_index: usize,
    pub seq_len: usize,
    pub ssm_indices: Vec<usize>,
    pub attn_indices: Vec<usize>,
}

impl SplitPlan {
    /// True when both branches see every position.
    pub fn is_full(&self) -> bool {
        self.ssm_indices.len() == self.seq_len && self.attn_indices.len() == self.seq_len
    }
}

/// Builds the split plan for block `block_index`.
///
/// `block_size` is only consulted by `FASplit` and `FACSplit`.
pub fn plan(mode: SplitMode, seq_len: usize, block_index: usize, block_size: usize) -> Result<SplitPlan> {
    if seq_len == 0 {
        return Err(Error::Split("sequence length must be positive".into()));
    }
    if mode.is_split() && seq_len < 2 {
        return Err(Error::Split(format!("{mode} needs at least 2 tokens, got {seq_len}")));
    }
    if mode.uses_block_size() && !(1..seq_len).contains(&block_size) {
        return Err(Error::Split(format!(
            "block_size {block_size} outside [1, {}] for L = {seq_len}",
            seq_len - 1
        )));
    }

    let all = || (0..seq_len).collect::<Vec<_>>();
    let (ssm_indices, attn_indices) = match mode {
        SplitMode::NoSplit => (all(), all()),
        SplitMode::AESplit => {
            let half = seq_len.div_ceil(2);
            let first: Vec<_> = (0..half).collect();
            let second: Vec<_> = (half..seq_len).collect();
            if block_index % 2 == 0 {
                (first, second)
            } else {
                (second, first)
            }
        }
        SplitMode::FASplit => ((0..block_size).collect(), (block_size..seq_len).collect()),
        SplitMode::FACSplit => {
            let offset = ((block_index as u128 * block_size as u128) % seq_len as u128) as usize;
            let mut in_window = vec![false; seq_len];
            for k in 0..block_size {
                in_window[(offset + k) % seq_len] = true;
            }
            let (mut ssm, mut attn) = (Vec::with_capacity(block_size), Vec::with_capacity(seq_len - block_size));
            for (pos, &w) in in_window.iter().enumerate() {
                if w {
                    ssm.push(pos);
                } else {
                    attn.push(pos);
                }
            }
            (ssm, attn)
        }
    };

    Ok(SplitPlan { block_index, seq_len, ssm_indices, attn_indices })
}

/// Rows of `x` at `indices`, in the given order.
pub fn gather<T: Scalar>(x: ArrayView2<T>, indices: &[usize]) -> Array2<T> {
    x.select(Axis(0), indices)
}

/// Lays out branch outputs as `L` fusion inputs of width `2d`.
///
/// Columns `[0, d)` hold the SSM output for positions the SSM saw and zeros
/// elsewhere; columns `[d, 2d)` do the same for attention.
pub fn scatter_merge<T: Scalar>(
    plan: &SplitPlan,
    ssm_out: ArrayView2<T>,
    attn_out: ArrayView2<T>,
    d: usize,
) -> Result<Array2<T>> {
    check_rows("ssm", plan.ssm_indices.len(), ssm_out, d)?;
    check_rows("attention", plan.attn_indices.len(), attn_out, d)?;

    let mut merged = Array2::zeros((plan.seq_len, 2 * d));
    for (row, &pos) in ssm_out.rows().into_iter().zip(&plan.ssm_indices) {
        merged.slice_mut(s![pos, ..d]).assign(&row);
    }
    for (row, &pos) in attn_out.rows().into_iter().zip(&plan.attn_indices) {
        merged.slice_mut(s![pos, d..]).assign(&row);
    }
    Ok(merged)
}

/// Adjoint of [`scatter_merge`]: splits `dz` (`L x 2d`) back into per-branch
/// gradients aligned with the plan's index lists.
pub fn split_merged<T: Scalar>(plan: &SplitPlan, dz: ArrayView2<T>, d: usize) -> (Array2<T>, Array2<T>) {
    let ssm = dz.slice(s![.., ..d]).select(Axis(0), &plan.ssm_indices);
    let attn = dz.slice(s![.., d..]).select(Axis(0), &plan.attn_indices);
    (ssm, attn)
}

fn check_rows<T>(branch: &str, expected: usize, out: ArrayView2<T>, d: usize) -> Result<()> {
    if out.nrows() != expected || out.ncols() != d {
        return Err(Error::Shape(format!(
            "{branch} output is {}x{}, plan expects {expected}x{d}",
            out.nrows(),
            out.ncols()
        )));
    }
    Ok(())
}
