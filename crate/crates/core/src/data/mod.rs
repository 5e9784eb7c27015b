//! Corpus ingestion and fixed-length chunk loaders.
//!
//! A corpus is one token stream. For a given `seq_len` it is cut into
//! `floor((len - 1) / seq_len)` contiguous chunks; chunk `i` covers inputs
//! `[i*L, i*L + L)` and targets shifted by one. The trailing remainder is
//! dropped. Chunk order is reshuffled every epoch from `(seed, epoch)`.

pub mod synth;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::profiler;

/// On-disk corpus encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    /// Each byte is one token.
    #[default]
    Bytes,
    /// Headerless little-endian u32 ids.
    U32le,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    tokens: Vec<u32>,
    vocab_size: usize,
    source_digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn token_digest(tokens: &[u32]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Corpus {
    pub fn from_tokens(tokens: Vec<u32>, vocab_size: usize) -> Result<Self> {
        let digest = token_digest(&tokens);
        Self::with_digest(tokens, vocab_size, digest)
    }

    fn with_digest(tokens: Vec<u32>, vocab_size: usize, source_digest: String) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        if let Some((i, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
            return Err(Error::Data(format!("token {t} at offset {i} exceeds vocab_size {vocab_size}")));
        }
        Ok(Self {
            tokens,
            vocab_size,
            source_digest,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn digest(&self) -> &str {
        &self.source_digest
    }

    /// Number of chunks of `seq_len` inputs (plus one target) per epoch.
    pub fn chunk_count(&self, seq_len: usize) -> usize {
        if seq_len == 0 {
            return 0;
        }
        (self.tokens.len() - 1) / seq_len
    }

    /// Splits off the trailing `eval_fraction` of the stream as a disjoint held-out corpus.
    pub fn split_holdout(&self, eval_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(Error::Config(format!("eval_fraction must lie in (0, 1), got {eval_fraction}")));
        }
        let cut = ((self.tokens.len() as f64) * (1.0 - eval_fraction)).round() as usize;
        if cut < 2 || self.tokens.len() - cut < 2 {
            return Err(Error::Data(format!(
                "corpus of {} tokens too small to hold out {eval_fraction}",
                self.tokens.len()
            )));
        }
        let train = Corpus::from_tokens(self.tokens[..cut].to_vec(), self.vocab_size)?;
        let eval = Corpus::from_tokens(self.tokens[cut..].to_vec(), self.vocab_size)?;
        Ok((train, eval))
    }
}

/// Reads a corpus file. Byte files map each byte to its id.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat, vocab_size: usize) -> Result<Corpus> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let digest = sha256_hex(&raw);
    let tokens = match format {
        CorpusFormat::Bytes => raw.iter().map(|&b| b as u32).collect(),
        CorpusFormat::U32le => {
            if raw.len() % 4 != 0 {
                return Err(Error::Data(format!(
                    "{}: length {} is not a multiple of 4",
                    path.display(),
                    raw.len()
                )));
            }
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
    };
    Corpus::with_digest(tokens, vocab_size, digest)
}

/// `batch_size` sequences of `seq_len` inputs with next-token targets, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn tokens(&self) -> usize {
        self.inputs.len()
    }

    pub fn sequence(&self, b: usize) -> (&[u32], &[u32]) {
        let r = b * self.seq_len..(b + 1) * self.seq_len;
        (&self.inputs[r.clone()], &self.targets[r])
    }
}

/// Resumable position of a loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoaderState {
    pub seq_len: usize,
    pub tokens_per_batch: usize,
    pub seed: u64,
    pub epoch: u64,
    pub cursor: usize,
}

#[derive(Debug, Clone)]
pub struct ChunkLoader {
    corpus: Arc<Corpus>,
    seq_len: usize,
    tokens_per_batch: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

/// SplitMix64 finalizer; decorrelates nearby `(seed, epoch)` pairs.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch)));
    order
}

pub fn make_loader(corpus: Arc<Corpus>, seq_len: usize, tokens_per_batch: usize, seed: u64) -> Result<ChunkLoader> {
    if seq_len == 0 || tokens_per_batch == 0 || tokens_per_batch % seq_len != 0 {
        return Err(Error::Config(format!(
            "tokens_per_batch {tokens_per_batch} is not a positive multiple of seq_len {seq_len}"
        )));
    }
    if corpus.len() < seq_len + 1 {
        return Err(Error::Data(format!(
            "corpus of {} tokens shorter than seq_len {seq_len} + 1",
            corpus.len()
        )));
    }
    let chunks = corpus.chunk_count(seq_len);
    let batch_size = tokens_per_batch / seq_len;
    if chunks < batch_size {
        return Err(Error::Data(format!(
            "corpus yields {chunks} chunks of {seq_len}, fewer than one batch of {batch_size}"
        )));
    }
    Ok(ChunkLoader {
        order: epoch_order(chunks, seed, 0),
        corpus,
        seq_len,
        tokens_per_batch,
        seed,
        epoch: 0,
        cursor: 0,
    })
}

impl ChunkLoader {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn tokens_per_batch(&self) -> usize {
        self.tokens_per_batch
    }

    pub fn batch_size(&self) -> usize {
        self.tokens_per_batch / self.seq_len
    }

    pub fn chunks_per_epoch(&self) -> usize {
        self.order.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn state(&self) -> LoaderState {
        LoaderState {
            seq_len: self.seq_len,
            tokens_per_batch: self.tokens_per_batch,
            seed: self.seed,
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    /// Rebuilds a loader at a saved position over the same corpus.
    pub fn restore(corpus: Arc<Corpus>, state: LoaderState) -> Result<Self> {
        let mut l = make_loader(corpus, state.seq_len, state.tokens_per_batch, state.seed)?;
        if state.cursor > l.order.len() {
            return Err(Error::Format(format!(
                "loader cursor {} beyond {} chunks",
                state.cursor,
                l.order.len()
            )));
        }
        l.epoch = state.epoch;
        l.order = epoch_order(l.order.len(), l.seed, l.epoch);
        l.cursor = state.cursor;
        Ok(l)
    }

    /// Next full batch; starts a reshuffled epoch when the current one cannot fill it.
    pub fn next_batch(&mut self) -> Batch {
        let bs = self.batch_size();
        if self.cursor + bs > self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.order.len(), self.seed, self.epoch);
            self.cursor = 0;
        }
        let l = self.seq_len;
        let toks = self.corpus.tokens();
        let mut inputs = Vec::with_capacity(self.tokens_per_batch);
        let mut targets = Vec::with_capacity(self.tokens_per_batch);
        for &c in &self.order[self.cursor..self.cursor + bs] {
            inputs.extend_from_slice(&toks[c * l..c * l + l]);
            targets.extend_from_slice(&toks[c * l + 1..c * l + l + 1]);
        }
        self.cursor += bs;
        Batch {
            inputs,
            targets,
            batch_size: bs,
            seq_len: l,
        }
    }
}

/// Budget for [`capacity_pack`].
#[derive(Debug, Clone, Copy)]
pub enum PackBudget<'a> {
    /// Plain token count.
    Tokens(usize),
    /// Live-value budget under the profiler's memory model for `model`.
    Memory { model: &'a ModelConfig, values: u64 },
}

/// One batch holding as many whole sequences as the budget admits, taken
/// from the first chunks of the corpus in stream order.
pub fn capacity_pack(corpus: &Corpus, seq_len: usize, budget: PackBudget<'_>) -> Result<Batch> {
    if seq_len == 0 {
        return Err(Error::Data("seq_len must be positive".into()));
    }
    let batch_size = match budget {
        PackBudget::Tokens(n) => n / seq_len,
        PackBudget::Memory { model, values } => match profiler::max_tokens_at_capacity(model, seq_len, values) {
            Ok(tokens) => tokens / seq_len,
            Err(Error::Capacity(_)) => 0,
            Err(e) => return Err(e),
        },
    };
    if batch_size == 0 {
        return Err(Error::Data(format!("budget does not admit one sequence of {seq_len}")));
    }
    if corpus.chunk_count(seq_len) < batch_size {
        return Err(Error::Data(format!(
            "corpus holds {} chunks of {seq_len}, budget wants {batch_size}",
            corpus.chunk_count(seq_len)
        )));
    }
    let toks = corpus.tokens();
    let n = batch_size * seq_len;
    Ok(Batch {
        inputs: toks[..n].to_vec(),
        targets: toks[1..n + 1].to_vec(),
        batch_size,
        seq_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counting(n: usize) -> Arc<Corpus> {
        Arc::new(Corpus::from_tokens((0..n as u32).map(|i| i % 256).collect(), 256).unwrap())
    }

    #[test]
    fn batch_size_at_16k_tokens() {
        let c = counting(40_000);
        assert_eq!(make_loader(c.clone(), 128, 16384, 0).unwrap().batch_size(), 128);
        assert_eq!(make_loader(c, 1024, 16384, 0).unwrap().batch_size(), 16);
    }

    #[test]
    fn chunk_count_drops_remainder() {
        let c = counting(1000);
        assert_eq!(c.chunk_count(128), 7);
        assert_eq!(make_loader(c, 128, 128, 1).unwrap().chunks_per_epoch(), 7);
    }

    #[test]
    fn divisibility_is_config_error() {
        assert!(matches!(make_loader(counting(1000), 100, 128, 0), Err(Error::Config(_))));
    }

    #[test]
    fn too_small_for_one_batch_is_data_error() {
        assert!(matches!(make_loader(counting(100), 32, 128, 0), Err(Error::Data(_))));
        assert!(matches!(make_loader(counting(32), 32, 32, 0), Err(Error::Data(_))));
    }

    #[test]
    fn out_of_vocab_rejected() {
        assert!(matches!(Corpus::from_tokens(vec![1, 2, 11], 11), Err(Error::Data(_))));
        assert!(Corpus::from_tokens(vec![], 11).is_err());
    }

    #[test]
    fn epoch_rollover_reshuffles() {
        let c = counting(1 + 8 * 16);
        let mut l = make_loader(c, 16, 32, 3).unwrap();
        let first: Vec<_> = (0..4).map(|_| l.next_batch().inputs).collect();
        assert_eq!(l.epoch(), 0);
        let second: Vec<_> = (0..4).map(|_| l.next_batch().inputs).collect();
        assert_eq!(l.epoch(), 1);
        let mut a: Vec<u32> = first.concat();
        let mut b: Vec<u32> = second.concat();
        assert_ne!(a, b);
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn restore_continues_stream() {
        let c = counting(5000);
        let mut a = make_loader(c.clone(), 32, 128, 9).unwrap();
        for _ in 0..13 {
            a.next_batch();
        }
        let mut b = ChunkLoader::restore(c, a.state()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn token_budget_pack() {
        let c = counting(1000);
        let b = capacity_pack(&c, 16, PackBudget::Tokens(64)).unwrap();
        assert_eq!(b.batch_size, 4);
        assert_eq!(b.tokens(), 64);
        assert!(matches!(capacity_pack(&c, 16, PackBudget::Tokens(15)), Err(Error::Data(_))));
    }
}
