//! Held-out perplexity across context lengths.
//!
//! A window of `ctx_len` input tokens is followed by its `ctx_len` next-token
//! targets, so consecutive windows share one boundary token and every
//! evaluated token is predicted exactly once. The first token of each window
//! is context only.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{self, ModelParams};
use crate::numeric::Graph;
use crate::rope::{build_table, RopeScaling, RopeTable};

/// Window tokens per forward batch; bounds the `[T × T]` attention buffers.
const BATCH_TOKENS: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Unscaled rotary table of extent `ctx_len`.
    Extrapolation,
    /// Positions scaled by `trained_len / ctx_len`.
    Interpolation,
}

impl std::fmt::Display for PositionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PositionMode::Extrapolation => "extrapolation",
            PositionMode::Interpolation => "interpolation",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Extrapolation,
    Interpolation,
    /// Both modes at every length; they coincide up to the trained length.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub context_lengths: Vec<usize>,
    #[serde(default)]
    pub mode: EvalMode,
    /// Window start spacing; defaults to `ctx_len`. Must not be below it.
    #[serde(default)]
    pub stride: Option<usize>,
    /// Cap on evaluated tokens per length.
    #[serde(default)]
    pub max_tokens: Option<usize>,
}

impl EvalConfig {
    pub fn new(context_lengths: Vec<usize>, mode: EvalMode) -> Self {
        Self {
            context_lengths,
            mode,
            stride: None,
            max_tokens: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_lengths.is_empty() {
            return Err(Error::Config("eval needs at least one context length".into()));
        }
        if self.context_lengths.iter().any(|&c| c < 2) {
            return Err(Error::Config("context lengths must be at least 2".into()));
        }
        if self.context_lengths.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("context lengths must be sorted ascending".into()));
        }
        if self.max_tokens == Some(0) {
            return Err(Error::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Rotary table for evaluating at `ctx_len` after training at `trained_len`.
pub fn eval_table(params: &ModelParams, ctx_len: usize, mode: PositionMode, trained_len: usize) -> Result<RopeTable> {
    let mut rope = params.config.rope();
    rope.scaling = match mode {
        PositionMode::Interpolation if ctx_len > trained_len => RopeScaling::Interpolation {
            factor: ctx_len as f64 / trained_len as f64,
        },
        _ => RopeScaling::None,
    };
    build_table(&rope, ctx_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub tokens: usize,
}

/// Window placement for [`perplexity_windows`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windows {
    pub stride: usize,
    pub count: usize,
}

impl Windows {
    /// As many non-overlapping windows as the corpus holds.
    pub fn all(corpus: &Corpus, ctx_len: usize) -> Self {
        Self {
            stride: ctx_len,
            count: corpus.len().saturating_sub(1) / ctx_len.max(1),
        }
    }
}

fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    row[target] as f64 - lse
}

/// `exp(mean NLL)` over `windows` of `ctx_len` predictions each.
pub fn perplexity_windows(
    params: &ModelParams,
    corpus: &Corpus,
    ctx_len: usize,
    table: &Arc<RopeTable>,
    windows: Windows,
) -> Result<Perplexity> {
    if ctx_len < 2 {
        return Err(Error::Config(format!("ctx_len must be at least 2, got {ctx_len}")));
    }
    if windows.stride < ctx_len {
        return Err(Error::Config(format!("stride {} below ctx_len {ctx_len} overlaps windows", windows.stride)));
    }
    if corpus.len() < ctx_len + 1 || windows.count == 0 {
        return Err(Error::Data(format!(
            "eval corpus of {} tokens holds no window of {ctx_len} + 1",
            corpus.len()
        )));
    }
    let last_end = (windows.count - 1) * windows.stride + ctx_len + 1;
    if last_end > corpus.len() {
        return Err(Error::Data(format!("{} windows of {ctx_len} exceed the eval corpus", windows.count)));
    }
    let cfg = &params.config;
    let v = cfg.vocab_size;
    let toks = corpus.tokens();
    let per_batch = (BATCH_TOKENS / ctx_len).max(1);
    let mut nll = 0.0f64;
    let starts: Vec<usize> = (0..windows.count).map(|w| w * windows.stride).collect();
    for group in starts.chunks(per_batch) {
        let mut inputs = Vec::with_capacity(group.len() * ctx_len);
        for &s in group {
            inputs.extend_from_slice(&toks[s..s + ctx_len]);
        }
        let mut g = Graph::new();
        let bound = model::bind_frozen(&mut g, params);
        let out = model::logits(&mut g, &bound, cfg, &inputs, ctx_len, table)?;
        let logits = g.value(out).data();
        for (w, &s) in group.iter().enumerate() {
            for t in 0..ctx_len {
                let row = &logits[(w * ctx_len + t) * v..(w * ctx_len + t + 1) * v];
                nll -= log_softmax_at(row, toks[s + t + 1] as usize);
            }
        }
    }
    let tokens = windows.count * ctx_len;
    let mean_nll = nll / tokens as f64;
    if !mean_nll.is_finite() {
        return Err(Error::Numeric(format!("eval NLL at ctx_len {ctx_len}")));
    }
    Ok(Perplexity {
        perplexity: mean_nll.exp(),
        mean_nll,
        tokens,
    })
}

/// Perplexity over every non-overlapping window of the corpus.
pub fn perplexity(
    params: &ModelParams,
    corpus: &Corpus,
    ctx_len: usize,
    mode: PositionMode,
    trained_len: usize,
) -> Result<Perplexity> {
    if ctx_len < 2 {
        return Err(Error::Config(format!("ctx_len must be at least 2, got {ctx_len}")));
    }
    let table = Arc::new(eval_table(params, ctx_len, mode, trained_len)?);
    perplexity_windows(params, corpus, ctx_len, &table, Windows::all(corpus, ctx_len))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityRow {
    pub run_id: String,
    pub ctx_len: usize,
    pub mode: PositionMode,
    pub perplexity: f64,
    pub tokens_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub run_id: String,
    pub trained_len: usize,
    pub rows: Vec<PerplexityRow>,
}

/// One perplexity per requested (length, mode). Every length evaluates the
/// same token count when the lengths divide the budget fixed by the longest.
pub fn sweep(
    run_id: &str,
    params: &ModelParams,
    corpus: &Corpus,
    config: &EvalConfig,
    trained_len: usize,
) -> Result<PerplexityReport> {
    config.validate()?;
    let longest = *config.context_lengths.iter().max().expect("validated");
    let stride_of = |c: usize| config.stride.unwrap_or(c).max(c);
    let mut budget = Windows::all(corpus, longest).count * longest;
    if config.stride.is_some() {
        budget = config
            .context_lengths
            .iter()
            .map(|&c| (corpus.len().saturating_sub(c + 1) / stride_of(c) + 1) * c)
            .min()
            .unwrap_or(0);
    }
    if let Some(cap) = config.max_tokens {
        budget = budget.min(cap);
    }
    let mut rows = Vec::new();
    for &ctx in &config.context_lengths {
        let modes: &[PositionMode] = match config.mode {
            EvalMode::Extrapolation => &[PositionMode::Extrapolation],
            EvalMode::Interpolation => &[PositionMode::Interpolation],
            EvalMode::Both => &[PositionMode::Extrapolation, PositionMode::Interpolation],
        };
        let count = budget / ctx;
        if count == 0 {
            return Err(Error::Data(format!("eval corpus holds no window of {ctx} + 1")));
        }
        for &mode in modes {
            let table = Arc::new(eval_table(params, ctx, mode, trained_len)?);
            let p = perplexity_windows(params, corpus, ctx, &table, Windows { stride: stride_of(ctx), count })?;
            rows.push(PerplexityRow {
                run_id: run_id.to_string(),
                ctx_len: ctx,
                mode,
                perplexity: p.perplexity,
                tokens_evaluated: p.tokens,
            });
        }
    }
    Ok(PerplexityReport {
        run_id: run_id.to_string(),
        trained_len,
        rows,
    })
}

impl PerplexityReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_rows_csv(&self.rows, w)
    }
}

pub fn write_rows_csv<W: Write>(rows: &[PerplexityRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    out.flush().map_err(|e| Error::Serde(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub ctx_len: usize,
    pub mode: PositionMode,
    pub run_id: String,
    pub perplexity: f64,
    /// Perplexity divided by the baseline's at the same length and mode.
    pub ratio_vs_baseline: f64,
    /// Lowest perplexity among all runs at this length and mode.
    pub winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_id: String,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn winner(&self, ctx_len: usize, mode: PositionMode) -> Option<&str> {
        self.rows
            .iter()
            .find(|r| r.ctx_len == ctx_len && r.mode == mode && r.winner)
            .map(|r| r.run_id.as_str())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

fn keys(r: &PerplexityReport) -> Vec<(usize, PositionMode)> {
    r.rows.iter().map(|x| (x.ctx_len, x.mode)).collect()
}

/// Per (length, mode): ratio to the baseline run, winner flagged at the minimum.
pub fn compare_runs(reports: &[PerplexityReport], baseline_id: &str) -> Result<Comparison> {
    let base = reports
        .iter()
        .find(|r| r.run_id == baseline_id)
        .ok_or_else(|| Error::Config(format!("baseline run {baseline_id} not among reports")))?;
    let k = keys(base);
    if let Some(r) = reports.iter().find(|r| keys(r) != k) {
        return Err(Error::Config(format!(
            "run {} evaluated different context lengths than {baseline_id}",
            r.run_id
        )));
    }
    let mut rows = Vec::new();
    for (i, _) in k.iter().enumerate() {
        let best = reports
            .iter()
            .map(|r| r.rows[i].perplexity)
            .fold(f64::INFINITY, f64::min);
        let b = base.rows[i].perplexity;
        for r in reports {
            let x = &r.rows[i];
            rows.push(ComparisonRow {
                ctx_len: x.ctx_len,
                mode: x.mode,
                run_id: r.run_id.clone(),
                perplexity: x.perplexity,
                ratio_vs_baseline: x.perplexity / b,
                winner: x.perplexity == best,
            });
        }
    }
    Ok(Comparison {
        baseline_id: baseline_id.to_string(),
        rows,
    })
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
