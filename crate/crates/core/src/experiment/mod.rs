//! Config-driven experiment commands: train, profile, eval, schedule preview
//! and corpus generation. Each writes plot-ready CSV/JSON/JSONL artifacts.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{
    load_config, ArmSpec, DataSection, ExperimentConfig, LoadedConfig, ModelSection, OutputSection, ProfileSection,
    ScheduleSection,
};

use crate::data::synth::{self, SynthSpec};
use crate::data::{load_corpus, Corpus, CorpusFormat};
use crate::error::{Error, ErrorClass, Result};
use crate::eval::{self, compare_runs, Comparison, EvalConfig, PerplexityReport, PerplexityRow};
use crate::profiler::{self, ProfileReport, SweepOptions};
use crate::schedule::{preview, BudgetKind, Preview};
use crate::trainer::{load_checkpoint, save_checkpoint, MetricsWriter, RunOutputs, TrainConfig, TrainRun};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Trailing steps averaged into a run's reported final loss.
pub const FINAL_LOSS_WINDOW: usize = 20;

/// Process exit status for an error class.
pub fn exit_code(class: ErrorClass) -> i32 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
        ErrorClass::Format => 6,
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    eval::save_json(value, path)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

/// Written before training starts and never modified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub config_digest: String,
    pub corpus_digest: String,
    pub code_version: String,
    pub started_at: String,
    pub train: TrainConfig,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, String>,
}

/// Written next to the manifest when a run ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCompletion {
    pub run_id: String,
    pub finished_at: String,
    pub status: String,
    pub error: Option<String>,
    pub summary: Option<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub arm: String,
    pub seed: u64,
    pub steps: u64,
    pub tokens_seen: u64,
    pub elapsed_s: f64,
    pub final_seq_len: usize,
    /// Mean training loss over the last [`FINAL_LOSS_WINDOW`] steps.
    pub final_loss: f64,
}

/// Mean of the trailing `window` losses.
pub fn tail_loss(losses: &[f64], window: usize) -> f64 {
    let tail = &losses[losses.len().saturating_sub(window)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Debug, Clone, Default)]
pub struct TrainSelection {
    /// Arm names to run; all when empty.
    pub arms: Vec<String>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub runs: Vec<RunResult>,
    pub perplexity: Vec<PerplexityReport>,
    pub output_dir: PathBuf,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Loads the configured corpus and splits off the held-out tail.
pub fn load_split(loaded: &LoadedConfig) -> Result<(Arc<Corpus>, Corpus)> {
    let c = &loaded.config;
    let corpus = load_corpus(loaded.corpus_path(), c.data.format, c.model.vocab_size)?;
    let (train, held) = corpus.split_holdout(c.data.eval_fraction)?;
    Ok((Arc::new(train), held))
}

fn run_one(
    loaded: &LoadedConfig,
    arm: &ArmSpec,
    seed: u64,
    train: &Arc<Corpus>,
    held: &Corpus,
    log: &mut dyn FnMut(&str),
) -> Result<(RunResult, Option<PerplexityReport>)> {
    let cfg = &loaded.config;
    let run_id = format!("{}-s{}", arm.name, seed);
    let dir = loaded.output_dir().join(&run_id);
    create_dir(&dir)?;
    let tc = cfg.train_config(arm, seed)?;
    let outputs = RunOutputs::in_dir(&dir);
    let mut artifacts = BTreeMap::from([
        ("metrics".to_string(), path_string(&outputs.metrics)),
        ("checkpoint".to_string(), path_string(&outputs.checkpoint)),
        ("completion".to_string(), path_string(&dir.join("completion.json"))),
    ]);
    if cfg.eval.is_some() {
        artifacts.insert("perplexity_csv".into(), path_string(&dir.join("perplexity.csv")));
        artifacts.insert("perplexity_json".into(), path_string(&dir.join("perplexity.json")));
    }
    let manifest = RunManifest {
        run_id: run_id.clone(),
        arm: arm.name.clone(),
        seed,
        config_digest: cfg.digest(),
        corpus_digest: train.digest().to_string(),
        code_version: CODE_VERSION.to_string(),
        started_at: now(),
        train: tc.clone(),
        artifacts,
    };
    write_json(&manifest, &dir.join("manifest.json"))?;
    log(&format!("run {run_id}: lengths {:?}", tc.schedule.lengths()));

    let attempt = (|| -> Result<(RunResult, Option<PerplexityReport>)> {
        let mut run = TrainRun::new(tc, train.clone())?;
        let mut writer = MetricsWriter::create(&outputs.metrics)?;
        run.run(|r| writer.write(r))?;
        writer.finish()?;
        let annotations = BTreeMap::from([("run_id".to_string(), run_id.clone()), ("arm".to_string(), arm.name.clone())]);
        save_checkpoint(&run, &outputs.checkpoint, annotations)?;
        let losses: Vec<f64> = run.metrics().iter().map(|m| m.loss).collect();
        let p = run.progress();
        let result = RunResult {
            run_id: run_id.clone(),
            arm: arm.name.clone(),
            seed,
            steps: p.steps,
            tokens_seen: p.tokens_seen,
            elapsed_s: p.elapsed_s,
            final_seq_len: run.seq_len(),
            final_loss: tail_loss(&losses, FINAL_LOSS_WINDOW),
        };
        let report = match &cfg.eval {
            Some(e) => {
                let rep = eval::sweep(&run_id, run.params(), held, e, run.seq_len())?;
                rep.write_csv(csv_file(&dir.join("perplexity.csv"))?)?;
                write_json(&rep, &dir.join("perplexity.json"))?;
                Some(rep)
            }
            None => None,
        };
        Ok((result, report))
    })();

    let completion = RunCompletion {
        run_id: run_id.clone(),
        finished_at: now(),
        status: if attempt.is_ok() { "completed" } else { "failed" }.into(),
        error: attempt.as_ref().err().map(|e| e.to_string()),
        summary: attempt.as_ref().ok().map(|(r, _)| r.clone()),
    };
    write_json(&completion, &dir.join("completion.json"))?;
    if let Ok((r, _)) = &attempt {
        log(&format!(
            "run {run_id}: {} steps, {} tokens, {:.1}s, final loss {:.4}",
            r.steps, r.tokens_seen, r.elapsed_s, r.final_loss
        ));
    }
    attempt
}

fn csv_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Runs every selected arm for every seed, sequentially.
pub fn cmd_train(loaded: &LoadedConfig, sel: &TrainSelection, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let cfg = &loaded.config;
    for name in &sel.arms {
        cfg.arm(name)?;
    }
    let arms: Vec<&ArmSpec> = cfg
        .schedule
        .arms
        .iter()
        .filter(|a| sel.arms.is_empty() || sel.arms.contains(&a.name))
        .collect();
    let (train, held) = load_split(loaded)?;
    let out = loaded.output_dir();
    create_dir(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&out, e))?;

    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for &seed in &cfg.data.seeds {
        for arm in &arms {
            let (r, rep) = run_one(loaded, arm, seed, &train, &held, log)?;
            runs.push(r);
            reports.extend(rep);
        }
    }

    let mut w = csv::Writer::from_writer(csv_file(&out.join("summary.csv"))?);
    for r in &runs {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&out, e))?;
    if !reports.is_empty() {
        let rows: Vec<PerplexityRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        eval::write_rows_csv(&rows, csv_file(&out.join("perplexity.csv"))?)?;
        for &seed in &cfg.data.seeds {
            let suffix = format!("-s{seed}");
            let group: Vec<PerplexityReport> =
                reports.iter().filter(|r| r.run_id.ends_with(&suffix)).cloned().collect();
            if group.len() > 1 {
                let cmp = compare_runs(&group, &group[0].run_id)?;
                cmp.write_csv(csv_file(&out.join(format!("comparison{suffix}.csv")))?)?;
            }
        }
    }
    Ok(TrainOutcome {
        runs,
        perplexity: reports,
        output_dir: out,
    })
}

/// Times one training step per length and writes `profile.csv`.
pub fn cmd_profile(loaded: &LoadedConfig, lengths: Option<&[usize]>) -> Result<(ProfileReport, PathBuf)> {
    let cfg = &loaded.config;
    // Timing runs on filler tokens; the configured corpus must still load.
    load_corpus(loaded.corpus_path(), cfg.data.format, cfg.model.vocab_size)?;
    let section = cfg.profile.clone();
    let lengths: Vec<usize> = match (lengths, &section) {
        (Some(l), _) => l.to_vec(),
        (None, Some(p)) => p.lengths.clone(),
        (None, None) => return Err(Error::Config("no profile lengths given and no [profile] section".into())),
    };
    if lengths.is_empty() || lengths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("profile lengths must be non-empty and strictly increasing".into()));
    }
    let opts = SweepOptions {
        tokens_per_batch: cfg.data.tokens_per_batch,
        trials: section.as_ref().map_or(5, |p| p.trials),
        warmup: section.as_ref().map_or(1, |p| p.warmup),
        capacity_budget: section.as_ref().and_then(|p| p.capacity_values),
    };
    let model = cfg.model.to_model(cfg.data.seeds[0])?;
    let report = profiler::sweep(&model, &lengths, &opts)?;
    let out = loaded.output_dir();
    create_dir(&out)?;
    let path = out.join("profile.csv");
    report.save_csv(&path)?;
    Ok((report, path))
}

/// One preview per arm at `total` tokens or seconds.
pub fn cmd_schedule_preview(loaded: &LoadedConfig, total: f64) -> Result<Vec<(String, Preview)>> {
    let cfg = &loaded.config;
    let tpb = Some(cfg.data.tokens_per_batch as u64);
    cfg.schedule
        .arms
        .iter()
        .map(|a| Ok((a.name.clone(), preview(&a.schedule(cfg.schedule.budget_kind)?, total, tpb)?)))
        .collect()
}

pub fn render_preview(arm: &str, p: &Preview) -> String {
    let unit = match p.budget_kind {
        BudgetKind::Tokens => "tokens",
        BudgetKind::WallTime => "seconds",
    };
    let mut s = format!("arm {arm} ({} {unit})\n", p.total_budget);
    let _ = writeln!(s, "{:>5} {:>8} {:>14} {:>6} {:>8}", "stage", "seq_len", unit, "batch", "steps");
    for r in &p.rows {
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |x| x.to_string());
        let _ = writeln!(
            s,
            "{:>5} {:>8} {:>14} {:>6} {:>8}",
            r.stage_index,
            r.seq_len,
            r.budget,
            opt(r.batch_size.map(|b| b as u64)),
            opt(r.steps)
        );
    }
    for w in &p.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// Where `cmd_eval` reads held-out text from.
#[derive(Debug, Clone)]
pub struct EvalCorpus {
    pub path: PathBuf,
    pub format: CorpusFormat,
    pub eval_fraction: f64,
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub reports: Vec<PerplexityReport>,
    pub comparison: Option<Comparison>,
}

/// Perplexity sweeps for one or more checkpoints; a comparison table when
/// more than one is given. The first checkpoint is the baseline unless
/// `baseline` names another run.
pub fn cmd_eval(
    checkpoints: &[PathBuf],
    source: &EvalCorpus,
    config: &EvalConfig,
    baseline: Option<&str>,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    if checkpoints.is_empty() {
        return Err(Error::Config("eval needs at least one checkpoint".into()));
    }
    config.validate()?;
    let mut reports = Vec::new();
    let mut held: Option<Corpus> = None;
    for path in checkpoints {
        let ckpt = load_checkpoint(path)?;
        let vocab = ckpt.header.model().vocab_size;
        if held.is_none() {
            let corpus = load_corpus(&source.path, source.format, vocab)?;
            held = Some(corpus.split_holdout(source.eval_fraction)?.1);
        }
        let run_id = ckpt.header.annotations.get("run_id").cloned().unwrap_or_else(|| {
            path.parent()
                .and_then(|p| p.file_name())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path_string(path))
        });
        if reports.iter().any(|r: &PerplexityReport| r.run_id == run_id) {
            return Err(Error::Config(format!("duplicate run id `{run_id}` among checkpoints")));
        }
        let trained = ckpt.header.trained_len;
        let rep = eval::sweep(&run_id, &ckpt.params, held.as_ref().expect("loaded"), config, trained)?;
        reports.push(rep);
    }
    create_dir(out_dir)?;
    let rows: Vec<PerplexityRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    eval::write_rows_csv(&rows, csv_file(&out_dir.join("perplexity.csv"))?)?;
    write_json(&reports, &out_dir.join("perplexity.json"))?;
    let comparison = if reports.len() > 1 {
        let base = baseline.map_or_else(|| reports[0].run_id.clone(), str::to_string);
        let cmp = compare_runs(&reports, &base)?;
        cmp.write_csv(csv_file(&out_dir.join("comparison.csv"))?)?;
        write_json(&cmp, &out_dir.join("comparison.json"))?;
        Some(cmp)
    } else {
        None
    };
    Ok(EvalOutcome { reports, comparison })
}

/// Writes a synthetic corpus and returns its digest.
pub fn cmd_gen_corpus(spec: &SynthSpec, out: &Path) -> Result<String> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    synth::write_corpus(spec, out)
}
