use serde::{Deserialize, Serialize};

use crate::branches::{AttentionShape, SsmShape};
use crate::error::{Error, Result};
use crate::lanes::ExecMode;
use crate::router::SplitMode;

/// Shapes, depth and routing of a model. Every FLOP formula and parameter
/// count is a function of this struct alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub n_blocks: usize,
    pub seq_len: usize,
    pub split_mode: SplitMode,
    pub exec_mode: ExecMode,
    /// Pre-norm MLP sublayer after fusion.
    pub ffn: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The reference desk configuration.
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            d_inner: 128,
            d_state: 16,
            n_blocks: 4,
            seq_len: 128,
            split_mode: SplitMode::NoSplit,
            exec_mode: ExecMode::Parallel,
            ffn: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Hidden width of the feed-forward sublayer.
    pub fn d_ffn(&self) -> usize {
        4 * self.d_model
    }

    pub fn attention_shape(&self) -> AttentionShape {
        AttentionShape { d_model: self.d_model, n_heads: self.n_heads }
    }

    pub fn ssm_shape(&self) -> SsmShape {
        SsmShape { d_model: self.d_model, d_inner: self.d_inner, d_state: self.d_state }
    }

    pub fn with_split_mode(mut self, mode: SplitMode) -> Self {
        self.split_mode = mode;
        self
    }

    pub fn with_exec_mode(mut self, mode: ExecMode) -> Self {
        self.exec_mode = mode;
        self
    }

    /// All violated constraints, with their key names.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive = |key: &str, value: usize| {
            if value == 0 {
                v.push(format!("model.{key} must be positive"));
            }
        };
        positive("vocab_size", self.vocab_size);
        positive("d_model", self.d_model);
        positive("n_heads", self.n_heads);
        positive("d_inner", self.d_inner);
        positive("d_state", self.d_state);
        positive("n_blocks", self.n_blocks);
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            v.push(format!(
                "model.n_heads ({}) must divide model.d_model ({})",
                self.n_heads, self.d_model
            ));
        }
        if self.seq_len < 2 {
            v.push(format!("model.seq_len must be at least 2, got {}", self.seq_len));
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_desk_config() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.d_model, c.n_blocks, c.seq_len), (64, 4, 128));
    }

    #[test]
    fn reports_every_violation() {
        let c = ModelConfig { d_model: 10, n_heads: 4, seq_len: 1, n_blocks: 0, ..Default::default() };
        let v = c.violations();
        assert_eq!(v.len(), 3, "{v:?}");
        assert!(v.iter().any(|m| m.contains("n_heads")));
        assert!(v.iter().any(|m| m.contains("seq_len")));
        assert!(v.iter().any(|m| m.contains("n_blocks")));
    }

    #[test]
    fn serde_uses_exact_mode_names() {
        let c = ModelConfig { split_mode: SplitMode::FACSplit, ..Default::default() };
        let json = serde_json::to_string(&c).unwrap();
        assert!(json.contains("\"FACSplit\""));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"d_modl": 3}"#).is_err());
        let short: ModelConfig = serde_json::from_str(r#"{"split_mode": "fac"}"#).unwrap();
        assert_eq!(short.split_mode, SplitMode::FACSplit);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"split_mode": "half"}"#).is_err());
    }
}
