//! The two per-block computation paths.

pub mod attention;
pub mod ssm;

pub use attention::{Attention, AttentionCache, AttentionShape};
pub use ssm::{selective_scan, selective_scan_backward, Ssm, SsmCache, SsmMacTerms, SsmShape};
