//! Seeded synthetic byte corpus: a word-level Markov source with long-range
//! verbatim repeats.
//!
//! The Markov part gives local structure any context length can learn. The
//! repeats copy an earlier span from `copy_distance` bytes back, so only a
//! model that sees that far can predict them.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sha256_hex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub size: usize,
    pub seed: u64,
    pub words: usize,
    pub successors: usize,
    pub copy_prob: f64,
    pub copy_distance: (usize, usize),
    pub copy_len: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            size: 2 * 1024 * 1024,
            seed: 0,
            words: 512,
            successors: 6,
            copy_prob: 0.1,
            copy_distance: (32, 768),
            copy_len: (16, 64),
        }
    }
}

impl SynthSpec {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d0, d1) = self.copy_distance;
        let (l0, l1) = self.copy_len;
        if self.size == 0 || self.words < 2 || self.successors == 0 {
            return Err(Error::Config("size, words and successors must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.copy_prob) {
            return Err(Error::Config(format!("copy_prob {} outside [0, 1)", self.copy_prob)));
        }
        if d0 == 0 || d0 > d1 || l0 == 0 || l0 > l1 {
            return Err(Error::Config("copy ranges must be non-empty and positive".into()));
        }
        Ok(())
    }
}

fn make_word(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let len = rng.random_range(2..=8);
    (0..len).map(|_| b'a' + rng.random_range(0..26u8)).collect()
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon: Vec<Vec<u8>> = (0..spec.words).map(|_| make_word(&mut rng)).collect();
    let rank_weights: Vec<f64> = (0..spec.successors).map(|k| 1.0 / (k + 1) as f64).collect();
    let pick = WeightedIndex::new(&rank_weights).expect("positive weights");
    let successors: Vec<Vec<usize>> = (0..spec.words)
        .map(|_| (0..spec.successors).map(|_| rng.random_range(0..spec.words)).collect())
        .collect();

    let mut out = Vec::with_capacity(spec.size + 128);
    let mut word = rng.random_range(0..spec.words);
    while out.len() < spec.size {
        if out.len() > spec.copy_distance.0 && rng.random_bool(spec.copy_prob) {
            let dist = rng.random_range(spec.copy_distance.0..=spec.copy_distance.1.min(out.len()));
            let len = rng.random_range(spec.copy_len.0..=spec.copy_len.1);
            let start = out.len() - dist;
            for i in 0..len {
                let b = out[start + i];
                out.push(b);
            }
            continue;
        }
        out.extend_from_slice(&lexicon[word]);
        let r: f64 = rng.random();
        out.extend_from_slice(if r < 0.02 {
            b".\n"
        } else if r < 0.1 {
            b". "
        } else {
            b" "
        });
        word = successors[word][pick.sample(&mut rng)];
    }
    out.truncate(spec.size);
    Ok(out)
}

/// Writes the generated corpus and returns its sha256 digest.
pub fn write_corpus(spec: &SynthSpec, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = generate(spec)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
