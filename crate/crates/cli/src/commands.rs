use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ArgMatches;
use flowhn_core::bench::{measure, report_table, BenchOptions};
use flowhn_core::checkpoint;
use flowhn_core::data::{ingest_corpus, train_eval_split};
use flowhn_core::flops::{block_size_from_ratio, model_flops_per_token};
use flowhn_core::model::param_count;
use flowhn_core::router::{plan, SplitPlan};
use flowhn_core::train::{evaluate, Trainer};
use flowhn_core::{FlopProfile, Lanes, LanguageModel, SplitMode};
use serde::Serialize;

use crate::args::{BenchCmd, EvalCmd, FlopsCmd, RouteCmd, TrainCmd};
use crate::config::{apply_model, apply_train, explicit, resolve, snapshot, RunConfig};
use crate::error::CliError;

pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_FILE: &str = "eval.json";
pub const BENCH_CSV: &str = "bench.csv";
pub const ROUTE_FILE: &str = "route.txt";

fn fail_if(violations: Vec<String>) -> Result<(), CliError> {
    if violations.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(violations))
    }
}

fn check_file(key: &str, path: Option<&Path>, out: &mut Vec<String>) {
    match path {
        None => out.push(format!("{key} is required")),
        Some(p) if !p.is_file() => out.push(format!("{key} {} is not a readable file", p.display())),
        Some(_) => {}
    }
}

fn check_out_dir(path: &Path, out: &mut Vec<String>) {
    if path.exists() && !path.is_dir() {
        out.push(format!("paths.out_dir {} exists and is not a directory", path.display()));
    }
}

fn prepare_out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.paths.out_dir.clone();
    fs::create_dir_all(&dir).map_err(CliError::io(&dir))?;
    let snap = dir.join(CONFIG_SNAPSHOT);
    fs::write(&snap, snapshot(config)?).map_err(CliError::io(&snap))?;
    Ok(dir)
}

pub fn checkpoint_name(step: usize) -> String {
    format!("step_{step:06}.flwh")
}

#[derive(Debug, Serialize)]
struct EvalRecord {
    step: Option<usize>,
    checkpoint: PathBuf,
    eval_loss: f64,
    eval_windows: usize,
    eval_tokens: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(CliError::io(path))
}

pub fn train(cmd: &TrainCmd, m: &ArgMatches) -> Result<(), CliError> {
    let mut loaded = resolve(&cmd.common, m)?;
    let c = &mut loaded.config;
    apply_model(m, &cmd.model, &mut c.model);
    apply_train(m, &cmd.train, &mut c.train);
    if cmd.corpus.is_some() {
        c.paths.corpus = cmd.corpus.clone();
    }
    let config = loaded.config;
    let mut violations = config.model.violations();
    violations.extend(config.train.violations());
    check_file("paths.corpus", config.paths.corpus.as_deref(), &mut violations);
    check_out_dir(&config.paths.out_dir, &mut violations);
    fail_if(violations)?;

    let corpus = config.paths.corpus.as_deref().expect("validated");
    let windows = ingest_corpus(corpus, config.model.seq_len)?;
    let (train_windows, eval_windows) = train_eval_split(windows, config.train.eval_fraction)?;

    let dir = prepare_out_dir(&config)?;
    let ckpt_dir = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir).map_err(CliError::io(&ckpt_dir))?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(CliError::io(&metrics_path))?);

    eprintln!(
        "training {} params, {} split, {} train / {} eval windows",
        param_count(&config.model),
        config.model.split_mode,
        train_windows.len(),
        eval_windows.len()
    );
    let model = LanguageModel::<f32>::new(config.model.clone())?;
    let mut trainer = Trainer::new(model, config.train.clone())?;
    let total = config.train.total_steps;
    let every = config.train.checkpoint_every;
    let log_every = (total / 20).max(1);
    let mut last_ckpt = None;
    trainer.fit(&train_windows, |step, t| {
        let line = serde_json::to_string(step).map_err(|e| flowhn_core::Error::InvalidArgument(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        if step.step == total || (every > 0 && step.step % every == 0) {
            let path = ckpt_dir.join(checkpoint_name(step.step));
            checkpoint::save(&path, &t.model().to_store())?;
            last_ckpt = Some(path);
        }
        if step.step % log_every == 0 || step.step == total {
            eprintln!("step {:>6} loss {:.4} lr {:.3e} tps {:.0}", step.step, step.loss, step.lr, step.tps);
        }
        Ok(())
    })?;

    let checkpoint = last_ckpt.expect("final step always checkpoints");
    let lanes = Lanes::new(config.model.exec_mode);
    if eval_windows.is_empty() {
        eprintln!("no held-out windows; skipping evaluation");
        return Ok(());
    }
    let eval_loss = evaluate(trainer.model(), &eval_windows, &lanes)?;
    let record = EvalRecord {
        step: Some(total),
        checkpoint: checkpoint.strip_prefix(&dir).unwrap_or(&checkpoint).to_path_buf(),
        eval_loss,
        eval_windows: eval_windows.len(),
        eval_tokens: eval_windows.iter().map(|w| w.len() - 1).sum(),
    };
    write_json(&dir.join(EVAL_FILE), &record)?;
    println!("{}", serde_json::to_string(&record).map_err(|e| CliError::Usage(e.to_string()))?);
    Ok(())
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let entries = fs::read_dir(dir.join(CHECKPOINT_DIR)).ok()?;
    entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "flwh"))
        .max()
}

pub fn eval(cmd: &EvalCmd, m: &ArgMatches) -> Result<(), CliError> {
    let mut loaded = resolve(&cmd.common, m)?;
    let c = &mut loaded.config;
    apply_model(m, &cmd.model, &mut c.model);
    if explicit(m, "eval_fraction") {
        c.train.eval_fraction = cmd.eval_fraction;
    }
    if cmd.corpus.is_some() {
        c.paths.corpus = cmd.corpus.clone();
    }
    if cmd.checkpoint.is_some() {
        c.paths.checkpoint = cmd.checkpoint.clone();
    }
    if c.paths.checkpoint.is_none() {
        c.paths.checkpoint = latest_checkpoint(&c.paths.out_dir);
    }
    let config = loaded.config;
    let mut violations = config.model.violations();
    if !(0.0..1.0).contains(&config.train.eval_fraction) {
        violations.push(format!("train.eval_fraction must be in [0, 1), got {}", config.train.eval_fraction));
    }
    check_file("paths.corpus", config.paths.corpus.as_deref(), &mut violations);
    check_file("paths.checkpoint", config.paths.checkpoint.as_deref(), &mut violations);
    fail_if(violations)?;

    let ckpt = config.paths.checkpoint.clone().expect("validated");
    let store = checkpoint::load(&ckpt)?;
    let model = LanguageModel::<f32>::from_store(config.model.clone(), &store)?;
    let windows = ingest_corpus(config.paths.corpus.as_deref().expect("validated"), config.model.seq_len)?;
    let (_, eval_windows) = train_eval_split(windows, config.train.eval_fraction)?;
    let lanes = Lanes::new(config.model.exec_mode);
    let eval_loss = evaluate(&model, &eval_windows, &lanes)?;
    let record = EvalRecord {
        step: None,
        checkpoint: ckpt.clone(),
        eval_loss,
        eval_windows: eval_windows.len(),
        eval_tokens: eval_windows.iter().map(|w| w.len() - 1).sum(),
    };
    let dir = &config.paths.out_dir;
    if dir.is_dir() {
        let stem = ckpt.file_stem().map_or("checkpoint".into(), |s| s.to_string_lossy().into_owned());
        write_json(&dir.join(format!("eval_{stem}.json")), &record)?;
    }
    println!("{}", serde_json::to_string(&record).map_err(|e| CliError::Usage(e.to_string()))?);
    Ok(())
}

pub fn bench(cmd: &BenchCmd, m: &ArgMatches) -> Result<(), CliError> {
    let mut loaded = resolve(&cmd.common, m)?;
    let has_peak = loaded.has("bench.peak_flops") || cmd.peak_flops.is_some();
    let c = &mut loaded.config;
    apply_model(m, &cmd.model, &mut c.model);
    if let Some(p) = cmd.peak_flops {
        c.bench.peak_flops = p;
    }
    if explicit(m, "warmup_iters") {
        c.bench.warmup_iters = cmd.warmup_iters;
    }
    if explicit(m, "timed_iters") {
        c.bench.timed_iters = cmd.timed_iters;
    }
    if explicit(m, "bench_batch_size") {
        c.bench.batch_size = cmd.bench_batch_size;
    }
    if explicit(m, "seed") || loaded.has("train.seed") {
        loaded.config.bench.seed = loaded.config.train.seed;
    }
    let config = loaded.config;
    let mut violations = config.model.violations();
    if has_peak {
        violations.extend(config.bench.violations());
    } else {
        violations.extend(BenchOptions { peak_flops: 1.0, ..config.bench.clone() }.violations());
        violations.push("bench.peak_flops is required (set it in [bench] or pass --peak-flops)".into());
    }
    check_out_dir(&config.paths.out_dir, &mut violations);
    fail_if(violations)?;

    let exec = config.model.exec_mode;
    let mut reports = Vec::new();
    for &mode in &cmd.modes {
        eprintln!("measuring {mode} ({exec})");
        reports.push(measure(&config.model, mode, exec, &config.bench)?);
    }
    let (text, csv) = report_table(&reports)?;
    let dir = prepare_out_dir(&config)?;
    let csv_path = dir.join(BENCH_CSV);
    fs::write(&csv_path, csv).map_err(CliError::io(&csv_path))?;
    println!("# training iterations (forward+backward); FLOPs counted as 3x forward");
    print!("{text}");
    for r in reports.iter().filter(|r| !r.reliable) {
        eprintln!("warning: {} timings vary by {:.0}% (CV), marked unreliable", r.mode, 100.0 * r.cv);
    }
    Ok(())
}

pub fn flops(cmd: &FlopsCmd, m: &ArgMatches) -> Result<(), CliError> {
    let mut loaded = resolve(&cmd.common, m)?;
    apply_model(m, &cmd.model, &mut loaded.config.model);
    let cfg = loaded.config.model;
    fail_if(cfg.violations())?;
    let l = cfg.seq_len;
    let profile = FlopProfile::new(&cfg, l)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "d_model {} n_heads {} d_inner {} d_state {} n_blocks {} seq_len {} vocab {} params {}",
        cfg.d_model,
        cfg.n_heads,
        cfg.d_inner,
        cfg.d_state,
        cfg.n_blocks,
        l,
        cfg.vocab_size,
        param_count(&cfg)
    );
    let _ = writeln!(out, "attention FLOPs/token (context {l}) {:.0}", profile.f_attn_per_token);
    let _ = writeln!(out, "ssm FLOPs/token {:.0}", profile.f_ssm_per_token);
    let _ = writeln!(out, "block_size {}", profile.block_size);
    let _ = writeln!(
        out,
        "{:<10} {:>10} {:>11} {:>8} {:>8} {:>16}",
        "mode", "ssm_tokens", "attn_tokens", "ssm%", "attn%", "model_FLOPs/tok"
    );
    for mode in SplitMode::ALL {
        let (n_s, n_a) = profile.token_counts(mode, l);
        let share = profile.ssm_share(mode, l);
        let per_token = model_flops_per_token(&cfg.clone().with_split_mode(mode), l)?;
        let _ = writeln!(
            out,
            "{:<10} {:>10} {:>11} {:>8.1} {:>8.1} {:>16.0}",
            mode.name(),
            n_s,
            n_a,
            100.0 * share,
            100.0 * (1.0 - share),
            per_token
        );
    }
    print!("{out}");
    Ok(())
}

/// Compact range list such as `1-2,5-6`.
pub fn ranges(indices: &[usize], base: usize) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < indices.len() {
        let start = indices[i];
        let mut end = start;
        while i + 1 < indices.len() && indices[i + 1] == end + 1 {
            i += 1;
            end += 1;
        }
        parts.push(if start == end { format!("{}", start + base) } else { format!("{}-{}", start + base, end + base) });
        i += 1;
    }
    if parts.is_empty() {
        "-".into()
    } else {
        parts.join(",")
    }
}

pub fn format_route(mode: SplitMode, seq_len: usize, block_size: usize, plans: &[SplitPlan], one_based: bool) -> String {
    let base = usize::from(one_based);
    let mut out = format!(
        "mode {} seq_len {seq_len} blocks {} block_size {block_size} tokens numbered from {base}\n",
        mode.name(),
        plans.len()
    );
    for p in plans {
        let _ = writeln!(
            out,
            "block {}: ssm {} | attention {}",
            p.block_index,
            ranges(&p.ssm_indices, base),
            ranges(&p.attn_indices, base)
        );
    }
    out
}

pub fn route(cmd: &RouteCmd, m: &ArgMatches) -> Result<(), CliError> {
    let loaded = resolve(&cmd.common, m)?;
    let mut cfg = loaded.config.model.clone();
    if explicit(m, "seq_len") || cmd.common.config.is_none() {
        cfg.seq_len = cmd.seq_len;
    }
    let blocks = if explicit(m, "blocks") || cmd.common.config.is_none() { cmd.blocks } else { cfg.n_blocks };
    let l = cfg.seq_len;
    let mut violations = Vec::new();
    if l == 0 || (cmd.mode.is_split() && l < 2) {
        violations.push(format!("seq_len {l} too short for {}", cmd.mode));
    }
    if let Some(r) = cmd.flop_ratio {
        if !(r.is_finite() && r > 0.0) {
            violations.push(format!("flop_ratio must be positive, got {r}"));
        }
    }
    if cmd.flop_ratio.is_none() && cmd.block_size.is_none() && cmd.mode.uses_block_size() {
        violations.extend(cfg.violations());
    }
    check_out_dir(&loaded.config.paths.out_dir, &mut violations);
    fail_if(violations)?;

    let block_size = match (cmd.block_size, cmd.flop_ratio) {
        _ if !cmd.mode.uses_block_size() => 0,
        (Some(b), _) => b,
        (None, Some(r)) => block_size_from_ratio(l, r)?,
        (None, None) => FlopProfile::new(&cfg, l)?.block_size,
    };
    let plans = (0..blocks).map(|b| plan(cmd.mode, l, b, block_size)).collect::<Result<Vec<_>, _>>()?;
    let text = format_route(cmd.mode, l, block_size, &plans, cmd.one_based);

    let mut snapshot_cfg = loaded.config.clone();
    snapshot_cfg.model = RunConfig { model: cfg, ..Default::default() }.model;
    snapshot_cfg.model.split_mode = cmd.mode;
    snapshot_cfg.model.n_blocks = blocks.max(1);
    let dir = prepare_out_dir(&snapshot_cfg)?;
    let path = dir.join(ROUTE_FILE);
    fs::write(&path, &text).map_err(CliError::io(&path))?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_compact_runs() {
        assert_eq!(ranges(&[0, 1, 4, 5], 1), "1-2,5-6");
        assert_eq!(ranges(&[3], 0), "3");
        assert_eq!(ranges(&[0, 2, 3, 7], 0), "0,2-3,7");
        assert_eq!(ranges(&[], 0), "-");
    }

    #[test]
    fn worked_example_text() {
        let plans: Vec<_> = (0..3).map(|b| plan(SplitMode::FACSplit, 6, b, 4).unwrap()).collect();
        let text = format_route(SplitMode::FACSplit, 6, 4, &plans, true);
        let lines: Vec<_> = text.lines().skip(1).collect();
        assert_eq!(
            lines,
            [
                "block 0: ssm 1-4 | attention 5-6",
                "block 1: ssm 1-2,5-6 | attention 3-4",
                "block 2: ssm 3-6 | attention 1-2",
            ]
        );
    }

    #[test]
    fn checkpoint_names_sort_by_step() {
        assert!(checkpoint_name(9) < checkpoint_name(10));
    }
}
