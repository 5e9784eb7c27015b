mod common;

use std::sync::Arc;

use growlength::data::synth::{self, SynthSpec};
use growlength::data::Corpus;
use growlength::eval::{
    compare_runs, eval_table, perplexity, perplexity_windows, sweep, EvalConfig, EvalMode, PositionMode, Windows,
};
use growlength::model::{self, ModelConfig, ModelParams};
use growlength::rope::RopeScaling;
use growlength::schedule::{equal_shares, BudgetKind};
use growlength::trainer::{OptimizerConfig, RunBudget, TrainConfig, TrainRun};
use growlength::Error;
use proptest::prelude::*;

fn hand_set(cfg: &ModelConfig) -> ModelParams {
    let mut p = model::init(cfg).unwrap();
    for (ti, t) in p.tensors_mut().into_iter().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v = 0.4 * ((ti * 17 + j * 5) as f32 * 0.291).sin();
        }
    }
    p
}

fn tiny_corpus(n: usize) -> Corpus {
    let toks = (0..n as u32).map(|i| (i * 5 + i * i / 7) % 11).collect();
    Corpus::from_tokens(toks, 11).unwrap()
}

fn oracle_ppl(p: &ModelParams, corpus: &Corpus, ctx: usize, stride: usize, count: usize) -> f64 {
    let w = common::params_f64(p);
    let toks = corpus.tokens();
    let mut nll = 0.0;
    for k in 0..count {
        let s = k * stride;
        let lg = common::logits(p, &w, &toks[s..s + ctx]);
        nll += common::cross_entropy(&lg, &toks[s + 1..s + ctx + 1]) * ctx as f64;
    }
    (nll / (count * ctx) as f64).exp()
}

fn byte_corpus(size: usize, seed: u64) -> Corpus {
    let bytes = synth::generate(&SynthSpec::new(size, seed)).unwrap();
    Corpus::from_tokens(bytes.into_iter().map(u32::from).collect(), 256).unwrap()
}

#[test]
fn uniform_predictor_scores_vocab_size() {
    let mut p = model::init(&ModelConfig::small()).unwrap();
    p.head_w.data_mut().fill(0.0);
    p.head_b.data_mut().fill(0.0);
    let corpus = byte_corpus(4096, 2);
    let r = perplexity(&p, &corpus, 64, PositionMode::Extrapolation, 64).unwrap();
    assert!((r.perplexity - 256.0).abs() <= 0.3, "{}", r.perplexity);
    assert!((r.perplexity / 256.0 - 1.0).abs() <= 0.002);
    assert_eq!(r.tokens, 4095 / 64 * 64);
}

#[test]
fn tiny_model_matches_scalar_oracle() {
    let p = hand_set(&ModelConfig::tiny());
    let corpus = tiny_corpus(41);
    let r = perplexity(&p, &corpus, 8, PositionMode::Extrapolation, 8).unwrap();
    let want = oracle_ppl(&p, &corpus, 8, 8, 5);
    assert_eq!(r.tokens, 40);
    assert!((r.perplexity / want - 1.0).abs() < 1e-4, "{} vs {want}", r.perplexity);
}

#[test]
fn interpolation_matches_scaled_oracle() {
    let p = hand_set(&ModelConfig::tiny());
    let corpus = tiny_corpus(33);
    let r = perplexity(&p, &corpus, 16, PositionMode::Interpolation, 4).unwrap();
    let mut scaled = p.clone();
    scaled.config.rope.scaling = RopeScaling::Interpolation { factor: 4.0 };
    let want = oracle_ppl(&scaled, &corpus, 16, 16, 2);
    assert!((r.perplexity / want - 1.0).abs() < 1e-4, "{} vs {want}", r.perplexity);
    let ex = perplexity(&p, &corpus, 16, PositionMode::Extrapolation, 4).unwrap();
    assert!((ex.perplexity - r.perplexity).abs() > 1e-6);
}

#[test]
fn interpolation_at_factor_one_equals_extrapolation() {
    let p = hand_set(&ModelConfig::tiny());
    let corpus = tiny_corpus(200);
    for trained in [16, 32] {
        let a = perplexity(&p, &corpus, 16, PositionMode::Extrapolation, trained).unwrap();
        let b = perplexity(&p, &corpus, 16, PositionMode::Interpolation, trained).unwrap();
        assert!((a.perplexity - b.perplexity).abs() < 1e-6);
    }
}

#[test]
fn short_corpus_is_a_data_error() {
    let p = hand_set(&ModelConfig::tiny());
    let corpus = tiny_corpus(8);
    assert!(matches!(
        perplexity(&p, &corpus, 8, PositionMode::Extrapolation, 8),
        Err(Error::Data(_))
    ));
    let t = Arc::new(eval_table(&p, 4, PositionMode::Extrapolation, 4).unwrap());
    let r = perplexity_windows(&p, &corpus, 4, &t, Windows { stride: 2, count: 1 });
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn sweep_evaluates_equal_tokens_per_length() {
    let p = hand_set(&ModelConfig::tiny());
    let corpus = tiny_corpus(300);
    let cfg = EvalConfig::new(vec![8, 16, 32], EvalMode::Both);
    let rep = sweep("r", &p, &corpus, &cfg, 16).unwrap();
    let keys: Vec<(usize, PositionMode)> = rep.rows.iter().map(|r| (r.ctx_len, r.mode)).collect();
    assert_eq!(
        keys,
        vec![
            (8, PositionMode::Extrapolation),
            (8, PositionMode::Interpolation),
            (16, PositionMode::Extrapolation),
            (16, PositionMode::Interpolation),
            (32, PositionMode::Extrapolation),
            (32, PositionMode::Interpolation),
        ]
    );
    assert_eq!(rep.rows[0].perplexity, rep.rows[1].perplexity);
    assert_ne!(rep.rows[4].perplexity, rep.rows[5].perplexity);
    assert!(rep.rows.iter().all(|r| r.tokens_evaluated == 288 && r.perplexity >= 1.0));
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("run_id,ctx_len,mode,perplexity,tokens_evaluated\n"));
    assert_eq!(text.lines().count(), 7);

    let capped = EvalConfig {
        max_tokens: Some(64),
        ..EvalConfig::new(vec![8, 16], EvalMode::Extrapolation)
    };
    let rep = sweep("r", &p, &corpus, &capped, 16).unwrap();
    assert!(rep.rows.iter().all(|r| r.tokens_evaluated == 64));
    assert!(compare_runs(&[rep.clone(), rep], "r").unwrap().rows.iter().all(|r| r.ratio_vs_baseline == 1.0));
}

#[test]
fn trained_model_beats_its_initialization() {
    let corpus = Arc::new(byte_corpus(200_000, 5));
    let (train, held) = corpus.split_holdout(0.1).unwrap();
    let mut m = ModelConfig::tiny().with_seed(4);
    m.vocab_size = 256;
    let cfg = TrainConfig {
        model: m,
        optimizer: OptimizerConfig::default(),
        schedule: equal_shares(&[32], BudgetKind::Tokens).unwrap(),
        budget: RunBudget::Tokens(256 * 200),
        tokens_per_batch: 256,
        data_seed: 1,
        record_wall_time: false,
    };
    let init = model::init(&cfg.model).unwrap();
    let mut run = TrainRun::new(cfg, Arc::new(train)).unwrap();
    run.run(|_| Ok(())).unwrap();
    let before = perplexity(&init, &held, 32, PositionMode::Extrapolation, 32).unwrap();
    let after = perplexity(run.params(), &held, 32, PositionMode::Extrapolation, 32).unwrap();
    assert!(after.perplexity < before.perplexity, "{} vs {}", after.perplexity, before.perplexity);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn window_order_does_not_change_perplexity(seed in any::<u64>(), perm in Just(()).prop_perturb(|_, mut rng| {
        let mut v: Vec<usize> = (0..6).collect();
        for i in (1..v.len()).rev() {
            v.swap(i, rng.random_range(0..=i));
        }
        v
    })) {
        let p = hand_set(&ModelConfig::tiny().with_seed(seed));
        let base = tiny_corpus(6 * 9);
        let blocks: Vec<&[u32]> = base.tokens().chunks(9).collect();
        let shuffled: Vec<u32> = perm.iter().flat_map(|&i| blocks[i].iter().copied()).collect();
        let shuffled = Corpus::from_tokens(shuffled, 11).unwrap();
        let t = Arc::new(eval_table(&p, 8, PositionMode::Extrapolation, 8).unwrap());
        let w = Windows { stride: 9, count: 6 };
        let a = perplexity_windows(&p, &base, 8, &t, w).unwrap().perplexity;
        let b = perplexity_windows(&p, &shuffled, 8, &t, w).unwrap().perplexity;
        prop_assert!((a / b - 1.0).abs() < 1e-9);
    }
}
