//! Staged pretraining loop.
//!
//! A [`TrainRun`] walks its schedule stage by stage. Parameters, optimizer
//! moments, the step counter and the learning-rate clock carry across every
//! transition; only the chunk loader and the rotary table extent change.

mod checkpoint;
mod metrics;
mod optimizer;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
pub use metrics::{read_metrics, MetricsRecord, MetricsWriter};
pub use optimizer::{AdamW, OptimizerConfig, UpdateStats};

use crate::data::{make_loader, Batch, ChunkLoader, Corpus, LoaderState};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::numeric::Graph;
use crate::rope::{build_table, RopeTable};
use crate::schedule::{BudgetKind, Position, Schedule, ScheduleCursor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunBudget {
    Tokens(u64),
    Seconds(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub budget: RunBudget,
    pub tokens_per_batch: usize,
    pub data_seed: u64,
    /// When false, records carry `wall_time_s = 0` so logs are byte-reproducible.
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        for s in self.schedule.stages() {
            if self.tokens_per_batch == 0 || self.tokens_per_batch % s.seq_len != 0 {
                return Err(Error::Config(format!(
                    "tokens_per_batch {} is not a multiple of stage seq_len {}",
                    self.tokens_per_batch, s.seq_len
                )));
            }
        }
        match (self.schedule.budget_kind(), self.budget) {
            (BudgetKind::Tokens, RunBudget::Tokens(n)) => {
                self.schedule.split_steps(n, self.tokens_per_batch as u64)?;
            }
            (BudgetKind::WallTime, RunBudget::Seconds(s)) => {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::Config(format!("wall-time budget must be positive, got {s}")));
                }
            }
            _ => {
                return Err(Error::Config("run budget kind does not match the schedule's budget_kind".into()));
            }
        }
        Ok(())
    }

    fn stage_budgets(&self) -> Result<Vec<f64>> {
        match self.budget {
            RunBudget::Tokens(n) => Ok(self
                .schedule
                .split_steps(n, self.tokens_per_batch as u64)?
                .into_iter()
                .map(|s| s as f64)
                .collect()),
            RunBudget::Seconds(s) => self.schedule.split_seconds(s),
        }
    }
}

/// Counters carried through checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub steps: u64,
    pub tokens_seen: u64,
    pub elapsed_s: f64,
    pub stage_index: usize,
    pub cursor: ScheduleCursor,
}

pub struct TrainRun {
    config: TrainConfig,
    corpus: Arc<Corpus>,
    params: ModelParams,
    opt: AdamW,
    loader: ChunkLoader,
    table: Arc<RopeTable>,
    progress: Progress,
    total_steps: Option<u64>,
    metrics: Vec<MetricsRecord>,
}

impl std::fmt::Debug for TrainRun {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainRun")
            .field("progress", &self.progress)
            .field("seq_len", &self.loader.seq_len())
            .finish_non_exhaustive()
    }
}

impl TrainRun {
    pub fn new(config: TrainConfig, corpus: Arc<Corpus>) -> Result<Self> {
        config.validate()?;
        let params = model::init(&config.model)?;
        let opt = AdamW::new(config.optimizer.clone(), &params);
        let cursor = ScheduleCursor::new(&config.stage_budgets()?)?;
        let progress = Progress {
            steps: 0,
            tokens_seen: 0,
            elapsed_s: 0.0,
            stage_index: 0,
            cursor,
        };
        Self::assemble(config, corpus, params, opt, progress, None)
    }

    fn assemble(
        config: TrainConfig,
        corpus: Arc<Corpus>,
        params: ModelParams,
        opt: AdamW,
        progress: Progress,
        loader_state: Option<LoaderState>,
    ) -> Result<Self> {
        if corpus.vocab_size() != config.model.vocab_size {
            return Err(Error::Config(format!(
                "corpus vocab {} != model vocab {}",
                corpus.vocab_size(),
                config.model.vocab_size
            )));
        }
        let stage = config.schedule.stages()[progress.stage_index];
        let loader = match loader_state {
            Some(s) => ChunkLoader::restore(corpus.clone(), s)?,
            None => make_loader(corpus.clone(), stage.seq_len, config.tokens_per_batch, config.data_seed)?,
        };
        // every stage must be able to fill a batch
        for s in config.schedule.stages() {
            if corpus.chunk_count(s.seq_len) < config.tokens_per_batch / s.seq_len {
                return Err(Error::Data(format!("corpus too small for one batch at seq_len {}", s.seq_len)));
            }
        }
        let table = Arc::new(build_table(&config.model.rope(), stage.seq_len)?);
        let total_steps = match config.budget {
            RunBudget::Tokens(n) => Some(n / config.tokens_per_batch as u64),
            RunBudget::Seconds(_) => None,
        };
        Ok(Self {
            config,
            corpus,
            params,
            opt,
            loader,
            table,
            progress,
            total_steps,
            metrics: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    pub fn tokens_seen(&self) -> u64 {
        self.progress.tokens_seen
    }

    pub fn stage_index(&self) -> usize {
        self.progress.stage_index
    }

    pub fn seq_len(&self) -> usize {
        self.loader.seq_len()
    }

    pub fn loader_state(&self) -> LoaderState {
        self.loader.state()
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn rope_extent(&self) -> usize {
        self.table.max_position()
    }

    pub fn is_done(&self) -> bool {
        self.progress.cursor.is_done()
    }

    /// Switches to a longer stage. Parameters, moments and counters are untouched.
    pub fn transition(&mut self, next_stage: usize) -> Result<()> {
        let stages = self.config.schedule.stages();
        let next = stages
            .get(next_stage)
            .ok_or_else(|| Error::Contract(format!("no stage {next_stage}")))?;
        if next.seq_len <= self.loader.seq_len() {
            return Err(Error::Contract(format!(
                "transition must lengthen sequences ({} -> {})",
                self.loader.seq_len(),
                next.seq_len
            )));
        }
        self.loader = make_loader(self.corpus.clone(), next.seq_len, self.config.tokens_per_batch, self.config.data_seed)?;
        self.table = Arc::new(build_table(&self.config.model.rope(), next.seq_len)?);
        self.progress.stage_index = next_stage;
        Ok(())
    }

    fn schedule_progress(&self) -> f64 {
        match self.config.budget {
            RunBudget::Tokens(_) => self.progress.steps as f64,
            RunBudget::Seconds(_) => self.progress.elapsed_s,
        }
    }

    /// Applies due transitions; returns the active stage or `None` when finished.
    pub fn poll(&mut self) -> Result<Option<usize>> {
        let adv = self.progress.cursor.advance(self.schedule_progress())?;
        for (_, to) in adv.transitions {
            if to > self.progress.stage_index {
                self.transition(to)?;
            }
        }
        Ok(match adv.position {
            Position::Active(i) => Some(i),
            Position::Done => None,
        })
    }

    /// Fraction of the global budget consumed once the coming step completes.
    fn budget_fraction(&self) -> f64 {
        match (self.config.budget, self.total_steps) {
            (RunBudget::Tokens(_), Some(total)) => (self.progress.steps + 1) as f64 / total as f64,
            (RunBudget::Seconds(deadline), _) => {
                let p = &self.progress;
                let mean = if p.steps > 0 { p.elapsed_s / p.steps as f64 } else { 0.0 };
                (p.elapsed_s + mean) / deadline
            }
            _ => 1.0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.config.optimizer.lr_at(self.budget_fraction())
    }

    /// Runs the next scheduled step, or returns `None` when the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<MetricsRecord>> {
        let start = Instant::now();
        if self.poll()?.is_none() {
            return Ok(None);
        }
        let batch = self.loader.next_batch();
        self.train_step_timed(&batch, start).map(Some)
    }

    /// One forward, backward and optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &Batch) -> Result<MetricsRecord> {
        self.train_step_timed(batch, Instant::now())
    }

    fn train_step_timed(&mut self, batch: &Batch, start: Instant) -> Result<MetricsRecord> {
        let seq_len = self.loader.seq_len();
        if batch.seq_len != seq_len || batch.tokens() != self.config.tokens_per_batch {
            return Err(Error::Contract(format!(
                "batch of {}x{} does not match active stage seq_len {seq_len} at {} tokens",
                batch.batch_size,
                batch.seq_len,
                self.config.tokens_per_batch
            )));
        }
        let diag = Error::NonFiniteLoss {
            step: self.progress.steps,
            stage_index: self.progress.stage_index,
            seq_len,
        };
        let lr = self.current_lr();
        let mut g = Graph::new();
        let bound = model::bind(&mut g, &self.params);
        let loss = match model::loss(&mut g, &bound, &self.config.model, &batch.inputs, &batch.targets, seq_len, &self.table) {
            Err(Error::Numeric(_)) => return Err(diag),
            other => other?,
        };
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(diag);
        }
        g.backward(loss)?;
        let grads: Vec<&[f32]> = bound
            .vars()
            .iter()
            .map(|&v| g.grad(v).ok_or_else(|| Error::Contract("parameter missed by backward".into())))
            .collect::<Result<_>>()?;
        match self.opt.update(&mut self.params, &grads, lr) {
            Err(Error::Numeric(_)) => return Err(diag),
            other => other?,
        };
        drop(g);

        self.progress.elapsed_s += start.elapsed().as_secs_f64();
        self.progress.tokens_seen += batch.tokens() as u64;
        let record = MetricsRecord {
            step: self.progress.steps,
            stage_index: self.progress.stage_index,
            seq_len,
            loss: loss_value as f64,
            tokens_seen: self.progress.tokens_seen,
            wall_time_s: if self.config.record_wall_time { self.progress.elapsed_s } else { 0.0 },
        };
        self.progress.steps += 1;
        self.metrics.push(record.clone());
        Ok(record)
    }

    /// Steps until the schedule is exhausted, handing each record to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&MetricsRecord) -> Result<()>,
    {
        while let Some(rec) = self.step()? {
            sink(&rec)?;
        }
        Ok(())
    }

    /// Continues a checkpointed run over the same corpus.
    pub fn resume(ckpt: Checkpoint, corpus: Arc<Corpus>) -> Result<Self> {
        let h = ckpt.header;
        if h.corpus_digest != corpus.digest() {
            return Err(Error::Data(format!(
                "checkpoint was trained on corpus {}, got {}",
                h.corpus_digest,
                corpus.digest()
            )));
        }
        h.train.validate()?;
        let opt = AdamW::from_parts(h.train.optimizer.clone(), &ckpt.params, ckpt.adam_m, ckpt.adam_v, h.optimizer_step)?;
        Self::assemble(h.train, corpus, ckpt.params, opt, h.progress, Some(h.loader))
    }
}

/// Where [`run_experiment`] writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunOutputs {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let d = dir.as_ref();
        Self {
            metrics: d.join("metrics.jsonl"),
            checkpoint: d.join("checkpoint.bin"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: u64,
    pub tokens_seen: u64,
    pub elapsed_s: f64,
    pub final_seq_len: usize,
    pub final_loss: Option<f64>,
}

/// Runs a schedule to completion, streaming metrics and saving a final checkpoint.
///
/// Metrics are flushed per record, so a failed run leaves every completed
/// step on disk.
pub fn run_experiment(config: TrainConfig, corpus: Arc<Corpus>, out: &RunOutputs) -> Result<(TrainRun, RunSummary)> {
    let mut run = TrainRun::new(config, corpus)?;
    let mut writer = MetricsWriter::create(&out.metrics)?;
    run.run(|r| writer.write(r))?;
    writer.finish()?;
    save_checkpoint(&run, &out.checkpoint, Default::default())?;
    let p = run.progress();
    let summary = RunSummary {
        steps: p.steps,
        tokens_seen: p.tokens_seen,
        elapsed_s: p.elapsed_s,
        final_seq_len: run.seq_len(),
        final_loss: run.metrics().last().map(|r| r.loss),
    };
    Ok((run, summary))
}
