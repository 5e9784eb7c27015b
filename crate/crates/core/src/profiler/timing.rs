use std::sync::Arc;
use std::time::Instant;

use super::memory::{estimate_memory, max_tokens_at_capacity};
use super::report::{report, ProfileReport, StepProfile};
use crate::data::{make_loader, Corpus};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::schedule::{equal_shares, BudgetKind};
use crate::trainer::{OptimizerConfig, RunBudget, TrainConfig, TrainRun};

pub const MIN_TRIALS: usize = 3;

/// Filler stream for timing; step cost does not depend on token values.
fn timing_corpus(model: &ModelConfig, tokens: usize) -> Result<Arc<Corpus>> {
    let v = model.vocab_size as u64;
    let toks = (0..tokens as u64)
        .map(|i| (i.wrapping_mul(2_654_435_761) >> 7) % v)
        .map(|t| t as u32)
        .collect();
    Ok(Arc::new(Corpus::from_tokens(toks, model.vocab_size)?))
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Median wall time of a full training step at `seq_len`, with
/// `batch_size = tokens_per_batch / seq_len`. `warmup` steps run first and
/// are not timed.
pub fn profile_step_time(
    model: &ModelConfig,
    seq_len: usize,
    tokens_per_batch: usize,
    trials: usize,
    warmup: usize,
) -> Result<StepProfile> {
    if trials < MIN_TRIALS {
        return Err(Error::Config(format!("profiling needs at least {MIN_TRIALS} trials, got {trials}")));
    }
    if seq_len == 0 || tokens_per_batch % seq_len != 0 || tokens_per_batch == 0 {
        return Err(Error::Config(format!(
            "tokens_per_batch {tokens_per_batch} is not a multiple of seq_len {seq_len}"
        )));
    }
    let corpus = timing_corpus(model, 2 * tokens_per_batch + 1)?;
    let steps = (warmup + trials) as u64;
    let cfg = TrainConfig {
        model: model.clone(),
        optimizer: OptimizerConfig::default(),
        schedule: equal_shares(&[seq_len], BudgetKind::Tokens)?,
        budget: RunBudget::Tokens(steps * tokens_per_batch as u64),
        tokens_per_batch,
        data_seed: 0,
        record_wall_time: false,
    };
    let mut run = TrainRun::new(cfg, corpus.clone())?;
    let mut loader = make_loader(corpus, seq_len, tokens_per_batch, 0)?;
    let mut times = Vec::with_capacity(trials);
    for i in 0..warmup + trials {
        let batch = loader.next_batch();
        let t0 = Instant::now();
        run.train_step(&batch)?;
        let dt = t0.elapsed().as_secs_f64();
        if i >= warmup {
            times.push(dt);
        }
    }
    let batch_size = tokens_per_batch / seq_len;
    Ok(StepProfile {
        seq_len,
        batch_size,
        tokens: tokens_per_batch,
        wall_time_s: median(&times),
        est_memory_values: estimate_memory(model, seq_len, batch_size).total(),
        trial_times_s: times,
    })
}

/// Options for [`sweep`].
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub tokens_per_batch: usize,
    pub trials: usize,
    pub warmup: usize,
    /// Live-value budget for the tokens-at-capacity column.
    pub capacity_budget: Option<u64>,
}

/// Profiles every length serially and assembles the report.
pub fn sweep(model: &ModelConfig, lengths: &[usize], opts: &SweepOptions) -> Result<ProfileReport> {
    let profiles = lengths
        .iter()
        .map(|&l| profile_step_time(model, l, opts.tokens_per_batch, opts.trials, opts.warmup))
        .collect::<Result<Vec<_>>>()?;
    let capacity = opts
        .capacity_budget
        .map(|b| lengths.iter().map(|&l| max_tokens_at_capacity(model, l, b)).collect::<Result<Vec<_>>>())
        .transpose()?;
    report(&profiles, capacity.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn trial_floor_and_divisibility() {
        let m = ModelConfig::tiny();
        assert!(matches!(profile_step_time(&m, 8, 64, 2, 0), Err(Error::Config(_))));
        assert!(matches!(profile_step_time(&m, 24, 64, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tokens_identity() {
        let p = profile_step_time(&ModelConfig::tiny(), 8, 64, 3, 1).unwrap();
        assert_eq!(p.tokens, 64);
        assert_eq!(p.batch_size * p.seq_len, p.tokens);
        assert!(p.wall_time_s > 0.0);
        assert_eq!(p.trial_times_s.len(), 3);
    }
}
