//! Run configuration: TOML file, then `FLOWHN_SEED`, then explicit flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use flowhn_core::bench::BenchOptions;
use flowhn_core::train::TrainConfig;
use flowhn_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::args::{Common, ModelArgs, TrainArgs};
use crate::error::CliError;

pub const DEFAULT_OUT_DIR: &str = "runs/flowhn";
pub const SEED_ENV: &str = "FLOWHN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: None, out_dir: PathBuf::from(DEFAULT_OUT_DIR), checkpoint: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub bench: BenchOptions,
}

/// A config plus the `section.key` names the file set explicitly.
#[derive(Debug, Default)]
pub struct Loaded {
    pub config: RunConfig,
    pub present: BTreeSet<String>,
}

impl Loaded {
    pub fn has(&self, key: &str) -> bool {
        self.present.contains(key)
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn toml_error(path: &Path, text: &str, e: &toml::de::Error) -> String {
    let at = e.span().map(|span| {
        let line = text[..span.start].matches('\n').count() + 1;
        format!(" at line {line}")
    });
    format!("{}{}: {}", path.display(), at.unwrap_or_default(), one_line(e.message()))
}

/// Keys each section accepts, read off the serialized defaults so the list
/// never drifts from the structs.
fn known_keys() -> serde_json::Map<String, serde_json::Value> {
    match serde_json::to_value(RunConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => unreachable!("RunConfig serializes to an object"),
    }
}

pub fn load_file(path: &Path) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
    parse(path, &text)
}

pub fn parse(path: &Path, text: &str) -> Result<Loaded, CliError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(vec![toml_error(path, text, &e)]))?;
    let known = known_keys();
    let mut unknown = Vec::new();
    let mut present = BTreeSet::new();
    for (section, value) in &table {
        let Some(serde_json::Value::Object(keys)) = known.get(section) else {
            unknown.push(format!("unknown section [{section}]"));
            continue;
        };
        let Some(entries) = value.as_table() else {
            unknown.push(format!("{section} must be a table"));
            continue;
        };
        for key in entries.keys() {
            if keys.contains_key(key) {
                present.insert(format!("{section}.{key}"));
            } else {
                unknown.push(format!("unknown key {section}.{key}"));
            }
        }
    }
    if !unknown.is_empty() {
        return Err(CliError::Config(unknown));
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(vec![format!("{}: {}", path.display(), one_line(e.message()))]))?;
    Ok(Loaded { config, present })
}

pub fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Loads the file named by `--config` (if any) and applies the seed rules:
/// `--seed` beats the file, which beats `FLOWHN_SEED`, which beats 0.
pub fn resolve(common: &Common, m: &ArgMatches) -> Result<Loaded, CliError> {
    let mut loaded = match &common.config {
        Some(path) => load_file(path)?,
        None => Loaded::default(),
    };
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| CliError::Config(vec![format!("{SEED_ENV} must be an unsigned integer, got {v:?}")]))?,
        ),
        Err(_) => None,
    };
    let c = &mut loaded.config;
    if explicit(m, "seed") {
        c.model.seed = common.seed;
        c.train.seed = common.seed;
    } else if let Some(seed) = env_seed {
        if !loaded.present.contains("model.seed") {
            c.model.seed = seed;
        }
        if !loaded.present.contains("train.seed") {
            c.train.seed = seed;
        }
    }
    if explicit(m, "out_dir") || !loaded.present.contains("paths.out_dir") {
        loaded.config.paths.out_dir = common.out_dir.clone();
    }
    Ok(loaded)
}

macro_rules! override_from {
    ($m:expr, $args:expr, $dst:expr, [$($field:ident),* $(,)?]) => {
        $(
            if explicit($m, stringify!($field)) {
                $dst.$field = $args.$field.clone();
            }
        )*
    };
}

pub fn apply_model(m: &ArgMatches, a: &ModelArgs, cfg: &mut ModelConfig) {
    override_from!(m, a, cfg, [vocab_size, d_model, n_heads, d_inner, d_state, n_blocks, seq_len, split_mode, ffn]);
    if explicit(m, "exec") {
        cfg.exec_mode = a.exec;
    }
}

pub fn apply_train(m: &ArgMatches, a: &TrainArgs, cfg: &mut TrainConfig) {
    override_from!(
        m,
        a,
        cfg,
        [
            peak_lr,
            beta1,
            beta2,
            weight_decay,
            warmup_fraction,
            total_steps,
            batch_size,
            grad_accum,
            grad_clip,
            checkpoint_every,
            eval_fraction,
        ]
    );
    if a.peak_flops.is_some() {
        cfg.peak_flops = a.peak_flops;
    }
}

/// Snapshot written into every artifact directory.
pub fn snapshot(config: &RunConfig) -> Result<String, CliError> {
    toml::to_string_pretty(config).map_err(|e| CliError::Config(vec![format!("cannot serialize config: {e}")]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_str(text: &str) -> Result<Loaded, CliError> {
        parse(Path::new("run.toml"), text)
    }

    #[test]
    fn empty_file_gives_defaults() {
        let l = parse_str("").unwrap();
        assert_eq!(l.config, RunConfig::default());
        assert!(l.present.is_empty());
    }

    #[test]
    fn sections_parse_and_record_presence() {
        let l = parse_str(
            "[model]\nd_model = 32\nsplit_mode = \"fac\"\n[train]\ntotal_steps = 5\npeak_flops = 1e12\n[paths]\ncorpus = \"c.txt\"\n",
        )
        .unwrap();
        assert_eq!(l.config.model.d_model, 32);
        assert_eq!(l.config.model.split_mode, flowhn_core::SplitMode::FACSplit);
        assert_eq!(l.config.train.total_steps, 5);
        assert_eq!(l.config.train.peak_flops, Some(1e12));
        assert_eq!(l.config.paths.corpus, Some(PathBuf::from("c.txt")));
        assert!(l.has("model.d_model") && l.has("train.peak_flops") && !l.has("model.seed"));
    }

    #[test]
    fn every_unknown_key_is_listed() {
        match parse_str("[model]\nd_modle = 3\nseqlen = 4\n[trian]\nx = 1\n[train]\nlr = 2\n") {
            Err(CliError::Config(v)) => {
                assert_eq!(v.len(), 4, "{v:?}");
                assert!(v.iter().any(|m| m.contains("model.d_modle")));
                assert!(v.iter().any(|m| m.contains("[trian]")));
                assert!(v.iter().any(|m| m.contains("train.lr")));
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn type_errors_are_single_line() {
        match parse_str("[model]\nd_model = \"wide\"\n") {
            Err(CliError::Config(v)) => assert!(v.len() == 1 && !v[0].contains('\n'), "{v:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.model.split_mode = flowhn_core::SplitMode::AESplit;
        c.train.peak_flops = Some(2.5e12);
        c.paths.corpus = Some(PathBuf::from("data/corpus.txt"));
        let text = snapshot(&c).unwrap();
        assert_eq!(parse_str(&text).unwrap().config, c);
    }
}
