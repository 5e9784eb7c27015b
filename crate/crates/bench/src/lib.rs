//! Shared inputs for the criterion benches under `benches/`.

use growlength::data::{Batch, Corpus};
use growlength::schedule::{equal_shares, BudgetKind};
use growlength::trainer::{OptimizerConfig, RunBudget, TrainConfig, TrainRun};
use growlength::{ModelConfig, Tensor};
use std::sync::Arc;

/// Smooth deterministic fill; values stay in `[-1, 1]`.
pub fn filled(shape: &[usize], phase: f32) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = (i as f32 * 0.618 + phase).sin();
    }
    t
}

/// A fixed-length run plus one reusable batch of `tokens_per_batch` tokens.
pub fn step_fixture(model: ModelConfig, seq_len: usize, tokens_per_batch: usize) -> (TrainRun, Batch) {
    let v = model.vocab_size as u32;
    let toks: Vec<u32> = (0..(tokens_per_batch * 4) as u32).map(|i| (i.wrapping_mul(2_654_435_761) >> 9) % v).collect();
    let corpus = Arc::new(Corpus::from_tokens(toks.clone(), model.vocab_size).expect("filler corpus"));
    let cfg = TrainConfig {
        model,
        optimizer: OptimizerConfig::default(),
        schedule: equal_shares(&[seq_len], BudgetKind::Tokens).expect("one stage"),
        budget: RunBudget::Tokens(1 << 40),
        tokens_per_batch,
        data_seed: 0,
        record_wall_time: false,
    };
    let run = TrainRun::new(cfg, corpus).expect("valid fixture");
    let batch = Batch {
        inputs: toks[..tokens_per_batch].to_vec(),
        targets: toks[1..tokens_per_batch + 1].to_vec(),
        batch_size: tokens_per_batch / seq_len,
        seq_len,
    };
    (run, batch)
}
