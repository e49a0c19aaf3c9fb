//! Subcommand implementations. Each returns the text to print on stdout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use palm_lab_core::data::{generate_dataset, length_stats, LengthStats, MetricsReport};
use palm_lab_core::evaluation::{default_max_len, evaluate_model};
use palm_lab_core::jacobian::{sensitivity_curve, verify_closed_forms, VerifyDims, VerifyReport};
use palm_lab_core::models::{
    load_checkpoint, loss_log_csv, save_checkpoint, train, EpochLog, LossBreakdown, Model, Variant,
};
use palm_lab_core::{AttentionMode, ParallelCorpus, SensitivityConfig, ToyTaskSpec};
use serde::{Deserialize, Serialize};

use crate::config::{load_corpus, ExperimentConfig};
use crate::VerificationFailed;

/// Width of the random instances used by `sensitivity`.
pub const SENSITIVITY_D: usize = 8;
/// Base seed of the closed-form verification trials.
pub const VERIFY_BASE_SEED: u64 = 0;
/// Environment variable capping the number of concurrent trainings in `compare`.
pub const THREADS_ENV: &str = "PALM_LAB_THREADS";

/// Path of the loss log written next to a checkpoint.
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    checkpoint.with_file_name(name)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Reads a task spec: either a bare `ToyTaskSpec` or an experiment config with a `task`.
pub fn load_task_spec(path: &Path) -> Result<ToyTaskSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = match serde_json::from_str::<ToyTaskSpec>(&text) {
        Ok(spec) => spec,
        Err(bare_err) => match ExperimentConfig::parse(&text) {
            Ok(ExperimentConfig { task: Some(task), .. }) => task,
            _ => return Err(bare_err).with_context(|| format!("invalid task spec {}", path.display())),
        },
    };
    spec.validate().with_context(|| format!("invalid task spec {}", path.display()))?;
    Ok(spec)
}

pub fn gen_data(spec: &Path, out: &Path) -> Result<String> {
    let spec = load_task_spec(spec)?;
    let corpus = generate_dataset(&spec)?;
    write_file(out, corpus.to_text().as_bytes())?;
    Ok(format!("{} pairs\n", corpus.len()))
}

pub fn cmd_train(config: &Path, data: &Path, out: &Path) -> Result<String> {
    let cfg = ExperimentConfig::load(config)?;
    let explicit = cfg.vocab(None).ok();
    let corpus = load_corpus(data, explicit)?;
    let model_cfg = cfg.model_config(Some(corpus.vocab()))?;
    ensure!(!corpus.is_empty(), "training corpus {} is empty", data.display());
    let outcome = train(model_cfg, corpus.pairs(), &cfg.train, cfg.seed)?;
    save_checkpoint(&outcome.model, out).with_context(|| format!("writing {}", out.display()))?;
    let log_path = loss_log_path(out);
    write_file(&log_path, loss_log_csv(&outcome.log).as_bytes())?;
    let mut msg = format!(
        "trained {} ({} parameters) on {} pairs for {} epochs\n",
        cfg.label(),
        outcome.model.parameter_count(),
        corpus.len(),
        cfg.train.epochs
    );
    if let Some(last) = outcome.log.last() {
        writeln!(msg, "final loss {:.6}", last.loss.total)?;
    }
    writeln!(msg, "loss log {}", log_path.display())?;
    Ok(msg)
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, metrics: &Path) -> Result<String> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let corpus = load_corpus(data, Some(model.config().vocab))?;
    ensure!(!corpus.is_empty(), "evaluation corpus {} is empty", data.display());
    let name = model.config().variant.name();
    let eval = evaluate_model(&model, name, &corpus, default_max_len(&corpus), &Default::default())?;
    write_file(metrics, to_json(&eval.report)?.as_bytes())?;
    Ok(summary_line(&eval.report))
}

fn summary_line(r: &MetricsReport) -> String {
    format!("{}: bleu {:.4} seq_accuracy {:.4} avg_len {:.4}\n", r.model, r.bleu, r.seq_accuracy, r.avg_len)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Runs the verification suite; the report is returned even when it fails.
pub fn jacobian_verify(trials: usize, dims: &str) -> Result<(String, VerifyReport)> {
    ensure!(trials >= 1, "--trials must be >= 1");
    let dims: VerifyDims = dims.parse()?;
    let modes = [AttentionMode::EncoderAttention, AttentionMode::CrossUnidirectional, AttentionMode::Partial];
    let report = verify_closed_forms(trials, dims, &modes, VERIFY_BASE_SEED)?;
    let mut out = format!("trials {} dims d={},n={},i={}\n", report.trials, dims.d, dims.n, dims.i);
    for (mode, err) in &report.per_mode {
        writeln!(out, "{:<8} max relative error {:.3e}", mode.name(), err)?;
    }
    writeln!(out, "max relative error {:.3e} (tolerance {:.0e})", report.max_error, palm_lab_core::jacobian::CLOSED_FORM_TOL)?;
    writeln!(out, "worst case: mode {} seed {}", report.worst_mode.name(), report.worst_seed)?;
    writeln!(out, "{}", if report.passed() { "PASS" } else { "FAIL" })?;
    Ok((out, report))
}

pub fn cmd_jacobian_verify(trials: usize, dims: &str) -> Result<String> {
    let (out, report) = jacobian_verify(trials, dims)?;
    if report.passed() {
        Ok(out)
    } else {
        print!("{out}");
        Err(VerificationFailed(format!("max relative error {:.3e}", report.max_error)).into())
    }
}

/// Parses `--seeds`: a count `K` (seeds `0..K`), a range `a..b`, or a list `a,b,c`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let spec = spec.trim();
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse()?, b.trim().parse()?);
        (a..b).collect()
    } else if spec.contains(',') {
        spec.split(',').map(|x| x.trim().parse::<u64>()).collect::<std::result::Result<_, _>>()?
    } else {
        (0..spec.parse::<u64>()?).collect()
    };
    ensure!(!seeds.is_empty(), "--seeds selects no seeds");
    Ok(seeds)
}

pub fn cmd_sensitivity(mode: &str, n: usize, imax: usize, seeds: &str, out: &Path) -> Result<String> {
    let mode: AttentionMode = mode.parse()?;
    let seeds = parse_seeds(seeds).context("invalid --seeds")?;
    ensure!(n >= 1 && imax >= 1, "--N and --imax must be >= 1");
    let report = sensitivity_curve(&SensitivityConfig::new(SENSITIVITY_D, n, imax, mode, seeds))?;
    write_file(out, report.to_csv().as_bytes())?;
    Ok(format!(
        "{} mode: {} steps, spearman(i, mean sensitivity) {:.4}, spearman(i, perturbation ratio) {:.4}\n",
        mode.name(),
        report.len(),
        report.sensitivity_trend(),
        report.ratio_trend()
    ))
}

/// One model's entry in the comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub config: String,
    pub name: String,
    pub variant: Variant,
    pub parameters: usize,
    pub final_loss: Option<LossBreakdown>,
    pub metrics: MetricsReport,
}

/// Output of `compare`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub models: Vec<ModelEntry>,
    pub lengths: LengthStats,
    /// `avg_len(model) − avg_len(LM)` for every model, when an `LM` entry exists.
    pub delta_l_vs_lm: Option<BTreeMap<String, f64>>,
    pub parameter_counts: BTreeMap<String, usize>,
    /// Whether `count(LM) < count(LM_PA) < count(ED)`; absent unless all three variants are present.
    pub parameter_order_holds: Option<bool>,
}

/// Result of training and evaluating one config.
pub struct RunResult {
    pub entry: ModelEntry,
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub outputs: Vec<Vec<u32>>,
}

/// Trains `cfg` on `train_set` and evaluates on `eval_set`.
pub fn run_experiment(
    label: &str,
    cfg: &ExperimentConfig,
    train_set: &ParallelCorpus,
    eval_set: &ParallelCorpus,
) -> Result<RunResult> {
    let model_cfg = cfg.model_config(Some(train_set.vocab()))?;
    let variant = model_cfg.variant;
    let outcome = train(model_cfg, train_set.pairs(), &cfg.train, cfg.seed).with_context(|| format!("training {label}"))?;
    let max_len = cfg.eval.max_len.unwrap_or_else(|| default_max_len(eval_set));
    let name = cfg.label();
    let eval = evaluate_model(&outcome.model, &name, eval_set, max_len, &cfg.eval.hallucination)
        .with_context(|| format!("evaluating {label}"))?;
    Ok(RunResult {
        entry: ModelEntry {
            config: label.to_string(),
            name,
            variant,
            parameters: outcome.model.parameter_count(),
            final_loss: outcome.log.last().map(|l| l.loss),
            metrics: eval.report,
        },
        model: outcome.model,
        log: outcome.log,
        outputs: eval.outputs,
    })
}

fn thread_cap(jobs: usize) -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?;
            ensure!(n >= 1, "{THREADS_ENV} must be >= 1");
            Ok(n.min(jobs.max(1)))
        }
        Err(_) => Ok(jobs.max(1)),
    }
}

/// Runs `jobs` with at most `threads` in flight; results keep the input order.
fn run_bounded<T: Send>(jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>, threads: usize) -> Vec<T> {
    let mut results = Vec::with_capacity(jobs.len());
    let mut jobs = jobs.into_iter();
    loop {
        let wave: Vec<_> = jobs.by_ref().take(threads).collect();
        if wave.is_empty() {
            return results;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = wave.into_iter().map(|job| s.spawn(job)).collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("training thread panicked")));
        });
    }
}

/// Config files (`*.json`) of a directory in name order.
pub fn config_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"));
    files.sort();
    ensure!(!files.is_empty(), "no *.json configs in {}", dir.display());
    Ok(files)
}

/// Trains and evaluates every config on a shared split of `data`.
pub fn compare(configs: &[(String, ExperimentConfig, PathBuf)], data: &Path) -> Result<(CompareReport, Vec<RunResult>)> {
    ensure!(!configs.is_empty(), "no configs to compare");
    let split = configs[0].1.eval.split;
    if let Some((label, _, _)) = configs.iter().find(|(_, c, _)| c.eval.split != split) {
        bail!("{label}: eval.split differs from {}; configs must share one split", configs[0].0);
    }
    let explicit: Vec<_> = configs.iter().filter_map(|(_, c, _)| c.vocab(None).ok()).collect();
    let vocab = explicit.iter().copied().max_by_key(|v| v.size);
    let corpus = load_corpus(data, vocab)?;
    ensure!(corpus.len() >= 2, "corpus {} needs at least 2 pairs to split", data.display());
    let (train_set, eval_set) = corpus.split_tail(split)?;
    ensure!(!train_set.is_empty() && !eval_set.is_empty(), "eval.split {split} leaves an empty part");
    let mut names = BTreeMap::new();
    for (label, cfg, _) in configs {
        if let Some(prev) = names.insert(cfg.label(), label) {
            bail!("{label} and {prev} share the report name {:?}", cfg.label());
        }
    }

    let jobs: Vec<Box<dyn FnOnce() -> Result<RunResult> + Send + '_>> = configs
        .iter()
        .map(|(label, cfg, _)| {
            let (tr, ev) = (&train_set, &eval_set);
            Box::new(move || run_experiment(label, cfg, tr, ev)) as Box<dyn FnOnce() -> Result<RunResult> + Send + '_>
        })
        .collect();
    let runs = run_bounded(jobs, thread_cap(configs.len())?).into_iter().collect::<Result<Vec<_>>>()?;

    let outputs: Vec<(&str, &[Vec<u32>])> = runs.iter().map(|r| (r.entry.name.as_str(), r.outputs.as_slice())).collect();
    let lengths = length_stats(&outputs)?;
    let delta_l_vs_lm = lengths
        .avg_len
        .get("LM")
        .map(|lm| lengths.avg_len.iter().map(|(k, v)| (k.clone(), v - lm)).collect());
    let parameter_counts: BTreeMap<String, usize> = runs.iter().map(|r| (r.entry.name.clone(), r.entry.parameters)).collect();
    let count_of = |v: Variant| runs.iter().find(|r| r.entry.variant == v).map(|r| r.entry.parameters);
    let parameter_order_holds = match (count_of(Variant::LM), count_of(Variant::LmPa), count_of(Variant::ED)) {
        (Some(lm), Some(pa), Some(ed)) => Some(lm < pa && pa < ed),
        _ => None,
    };
    let report = CompareReport {
        train_pairs: train_set.len(),
        eval_pairs: eval_set.len(),
        models: runs.iter().map(|r| r.entry.clone()).collect(),
        lengths,
        delta_l_vs_lm,
        parameter_counts,
        parameter_order_holds,
    };
    Ok((report, runs))
}

fn write_artifacts(run: &RunResult, config_path: &Path, output_dir: &Path) -> Result<()> {
    let base = config_path.parent().unwrap_or(Path::new("."));
    let dir = base.join(output_dir);
    let stem = &run.entry.name;
    let ckpt = dir.join(format!("{stem}.ckpt"));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    save_checkpoint(&run.model, &ckpt)?;
    write_file(&loss_log_path(&ckpt), loss_log_csv(&run.log).as_bytes())?;
    write_file(&dir.join(format!("{stem}.metrics.json")), to_json(&run.entry.metrics)?.as_bytes())?;
    let text: String = run
        .outputs
        .iter()
        .map(|o| o.iter().map(u32::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    write_file(&dir.join(format!("{stem}.outputs.txt")), text.as_bytes())
}

pub fn cmd_compare(configs_dir: &Path, data: &Path, out: &Path) -> Result<String> {
    let configs = config_files(configs_dir)?
        .into_iter()
        .map(|p| {
            let label = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            ExperimentConfig::load(&p).map(|c| (label, c, p))
        })
        .collect::<Result<Vec<_>>>()?;
    let (report, runs) = compare(&configs, data)?;
    for (run, (_, cfg, path)) in runs.iter().zip(&configs) {
        if let Some(dir) = &cfg.output_dir {
            write_artifacts(run, path, dir)?;
        }
    }
    write_file(out, to_json(&report)?.as_bytes())?;
    let mut msg: String = report.models.iter().map(|m| summary_line(&m.metrics)).collect();
    if let Some(dl) = report.lengths.delta_l {
        writeln!(msg, "delta_L (PALM - LM) {dl:.4}")?;
    }
    if let Some(ok) = report.parameter_order_holds {
        writeln!(msg, "parameter order LM < LM_PA < ED: {}", if ok { "holds" } else { "violated" })?;
    }
    Ok(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_accept_count_range_and_list() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4..7").unwrap(), vec![4, 5, 6]);
        assert_eq!(parse_seeds("9, 2,5").unwrap(), vec![9, 2, 5]);
        for bad in ["0", "5..5", "a", "1,,2", "-1"] {
            assert!(parse_seeds(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn loss_log_sits_next_to_the_checkpoint() {
        assert_eq!(loss_log_path(Path::new("runs/lm.ckpt")), PathBuf::from("runs/lm.ckpt.loss.csv"));
    }

    #[test]
    fn bounded_runner_keeps_order() {
        for threads in 1..=4 {
            let jobs: Vec<Box<dyn FnOnce() -> usize + Send>> =
                (0..7usize).map(|i| Box::new(move || i * i) as Box<dyn FnOnce() -> usize + Send>).collect();
            assert_eq!(run_bounded(jobs, threads), vec![0, 1, 4, 9, 16, 25, 36]);
        }
    }
}
