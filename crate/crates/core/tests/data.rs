use std::collections::HashMap;
use std::sync::Arc;

use growlength::data::synth::{self, SynthSpec};
use growlength::data::{capacity_pack, load_corpus, make_loader, Corpus, CorpusFormat, PackBudget};
use growlength::{Error, ModelConfig};
use proptest::prelude::*;

#[test]
fn one_mebibyte_file_is_one_token_per_byte() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.txt");
    let bytes: Vec<u8> = (0..1_048_576u32).map(|i| (i * 7 % 251) as u8).collect();
    std::fs::write(&path, &bytes).unwrap();
    let c = load_corpus(&path, CorpusFormat::Bytes, 256).unwrap();
    assert_eq!(c.len(), 1_048_576);
    assert_eq!(c.tokens()[9], 63);
    let again = load_corpus(&path, CorpusFormat::Bytes, 256).unwrap();
    assert_eq!(c.digest(), again.digest());
    assert_eq!(c.digest().len(), 64);
}

#[test]
fn empty_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty");
    std::fs::write(&path, b"").unwrap();
    assert!(matches!(load_corpus(&path, CorpusFormat::Bytes, 256), Err(Error::Data(_))));
    let missing = dir.path().join("nope");
    assert!(matches!(load_corpus(&missing, CorpusFormat::Bytes, 256), Err(Error::Io { .. })));
}

#[test]
fn u32_stream_checks_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ids.bin");
    let ids: Vec<u8> = [5u32, 70_000, 3].iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&path, &ids).unwrap();
    assert_eq!(load_corpus(&path, CorpusFormat::U32le, 70_001).unwrap().tokens(), &[5, 70_000, 3]);
    assert!(matches!(load_corpus(&path, CorpusFormat::U32le, 1000), Err(Error::Data(_))));
    std::fs::write(&path, [1u8, 2, 3]).unwrap();
    assert!(matches!(load_corpus(&path, CorpusFormat::U32le, 1000), Err(Error::Data(_))));
}

#[test]
fn targets_are_shifted_corpus_slices() {
    let toks: Vec<u32> = (0..5000u32).map(|i| (i * 13 + i / 7) % 256).collect();
    let c = Arc::new(Corpus::from_tokens(toks.clone(), 256).unwrap());
    let mut l = make_loader(c, 64, 256, 2).unwrap();
    for _ in 0..30 {
        let b = l.next_batch();
        for s in 0..b.batch_size {
            let (inp, tgt) = b.sequence(s);
            let start = toks.windows(64).position(|w| w == inp).unwrap();
            assert_eq!(start % 64, 0);
            assert_eq!(tgt, &toks[start + 1..start + 65]);
        }
    }
}

#[test]
fn holdout_is_disjoint_tail() {
    let c = Corpus::from_tokens((0..1000u32).map(|i| i % 256).collect(), 256).unwrap();
    let (train, eval) = c.split_holdout(0.1).unwrap();
    assert_eq!(train.len(), 900);
    assert_eq!(eval.len(), 100);
    assert_eq!(eval.tokens()[0], 900 % 256);
    assert!(c.split_holdout(1.0).is_err());
}

#[test]
fn shorter_sequences_pack_more_tokens_under_memory_budget() {
    let cfg = ModelConfig::small();
    let c = Corpus::from_tokens(vec![1; 200_000], 256).unwrap();
    let budget = 4_000_000;
    let mut prev = usize::MAX;
    for len in [32, 64, 128, 256, 512] {
        let b = capacity_pack(&c, len, PackBudget::Memory { model: &cfg, values: budget }).unwrap();
        assert!(b.tokens() <= prev);
        prev = b.tokens();
    }
    let b = capacity_pack(&c, 16, PackBudget::Tokens(64)).unwrap();
    assert_eq!(b.batch_size, 4);
    assert!(matches!(
        capacity_pack(&c, 512, PackBudget::Memory { model: &cfg, values: 1000 }),
        Err(Error::Data(_))
    ));
}

/// Conditional entropy in bits of a byte given the two preceding bytes.
fn trigram_entropy(bytes: &[u8]) -> f64 {
    let mut ctx: HashMap<(u8, u8), u64> = HashMap::new();
    let mut tri: HashMap<(u8, u8, u8), u64> = HashMap::new();
    for w in bytes.windows(3) {
        *ctx.entry((w[0], w[1])).or_default() += 1;
        *tri.entry((w[0], w[1], w[2])).or_default() += 1;
    }
    let n = (bytes.len() - 2) as f64;
    tri.iter()
        .map(|(&(a, b, _), &k)| {
            let p_joint = k as f64 / n;
            let p_cond = k as f64 / ctx[&(a, b)] as f64;
            -p_joint * p_cond.log2()
        })
        .sum()
}

#[test]
fn generated_corpus_has_learnable_structure() {
    let bytes = synth::generate(&SynthSpec::new(1 << 20, 0)).unwrap();
    let h = trigram_entropy(&bytes);
    assert!(h < 3.0, "trigram conditional entropy {h} bits");
}

#[test]
fn generated_file_size_and_digest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::new(2 * 1024 * 1024, 7);
    let d1 = synth::write_corpus(&spec, dir.path().join("a.txt")).unwrap();
    let d2 = synth::write_corpus(&spec, dir.path().join("b.txt")).unwrap();
    assert_eq!(d1, d2);
    assert_eq!(std::fs::metadata(dir.path().join("a.txt")).unwrap().len(), 2_097_152);
    let c = load_corpus(dir.path().join("a.txt"), CorpusFormat::Bytes, 256).unwrap();
    assert_eq!(c.digest(), d1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_batch_has_exactly_tokens_per_batch(
        len in 600usize..4000,
        log_seq in 2u32..6,
        mult in 1usize..4,
        seed in any::<u64>(),
        steps in 1usize..40,
    ) {
        let seq_len = 1usize << log_seq;
        let tpb = seq_len * mult;
        let c = Arc::new(Corpus::from_tokens((0..len as u32).map(|i| i % 256).collect(), 256).unwrap());
        let mut a = make_loader(c.clone(), seq_len, tpb, seed).unwrap();
        let mut b = make_loader(c, seq_len, tpb, seed).unwrap();
        for _ in 0..steps {
            let x = a.next_batch();
            prop_assert_eq!(x.tokens(), tpb);
            prop_assert_eq!(x.targets.len(), tpb);
            prop_assert_eq!(x, b.next_batch());
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_orders(s1 in any::<u64>(), s2 in any::<u64>()) {
        prop_assume!(s1 != s2);
        let c = Arc::new(Corpus::from_tokens((0..20_000u32).map(|i| i % 256).collect(), 256).unwrap());
        let mut a = make_loader(c.clone(), 16, 64, s1).unwrap();
        let mut b = make_loader(c, 16, 64, s2).unwrap();
        let xa: Vec<_> = (0..5).flat_map(|_| a.next_batch().inputs).collect();
        let xb: Vec<_> = (0..5).flat_map(|_| b.next_batch().inputs).collect();
        prop_assert_ne!(xa, xb);
    }
}
