//! Analytic live-value model of one training step.
//!
//! Counts 32-bit values held at the peak of a step: parameters, two AdamW
//! moments, one gradient per parameter, and every forward activation the tape
//! keeps for backward. The activation count is exactly what [`crate::Graph`]
//! holds for the model's loss graph (`activation_values + saved_values`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub parameters: u64,
    pub optimizer_moments: u64,
    pub gradients: u64,
    /// All tape activations, including `attention_scores`.
    pub activations: u64,
    /// The `[T × T]` probability matrices, one per head per layer per sequence.
    pub attention_scores: u64,
}

impl MemoryEstimate {
    pub fn total(&self) -> u64 {
        self.parameters + self.optimizer_moments + self.gradients + self.activations
    }

    pub fn fixed(&self) -> u64 {
        self.parameters + self.optimizer_moments + self.gradients
    }
}

/// Activation values per sequence of length `t` (without the scalar loss).
fn activations_per_sequence(c: &ModelConfig, t: u64) -> (u64, u64) {
    let (d, f, v, h, l) = (
        c.d_model as u64,
        c.ffn_dim() as u64,
        c.vocab_size as u64,
        c.n_heads as u64,
        c.n_layers as u64,
    );
    // per layer: ln1, q, k, v, rope q, rope k, attn, out proj, residual, ln2, proj, residual
    // are [T×d]; fc and gelu are [T×f]; each layer norm saves mean and rstd per row.
    let scores = l * h * t * t;
    let per_layer = 12 * t * d + 2 * t * f + 4 * t;
    // embedding out, final norm (+2T saved), logits, cross-entropy probabilities
    let outer = t * d + t * d + 2 * t + 2 * t * v;
    (l * per_layer + outer + scores, scores)
}

pub fn estimate_memory(config: &ModelConfig, seq_len: usize, batch_size: usize) -> MemoryEstimate {
    let p = config.param_count() as u64;
    let (per_seq, scores) = activations_per_sequence(config, seq_len as u64);
    let b = batch_size as u64;
    MemoryEstimate {
        parameters: p,
        optimizer_moments: 2 * p,
        gradients: p,
        activations: b * per_seq + 1,
        attention_scores: b * scores,
    }
}

/// `seq_len × max{B : estimate_memory(config, seq_len, B).total() <= budget}`.
pub fn max_tokens_at_capacity(config: &ModelConfig, seq_len: usize, budget_values: u64) -> Result<usize> {
    if seq_len == 0 {
        return Err(Error::Capacity("seq_len must be positive".into()));
    }
    let base = estimate_memory(config, seq_len, 0).total();
    let per_seq = activations_per_sequence(config, seq_len as u64).0;
    if budget_values < base + per_seq {
        return Err(Error::Capacity(format!(
            "budget {budget_values} below one sequence of {seq_len} ({} values)",
            base + per_seq
        )));
    }
    let b = (budget_values - base) / per_seq;
    debug_assert!(estimate_memory(config, seq_len, b as usize).total() <= budget_values);
    Ok(b as usize * seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_hand_count() {
        // tiny: 1 layer, d=16, f=64, V=11, H=2; T=4, B=1
        //   embedding out            4*16 = 64
        //   layer [T×d] arrays    12*4*16 = 768
        //   fc + gelu            2*4*64 = 512
        //   two norms saved       2*2*4 = 16
        //   attention probs       2*4*4 = 32
        //   final norm + saved  64 + 8 = 72
        //   logits + CE probs     2*4*11 = 88
        //   loss scalar                  1
        let acts = 64 + 768 + 512 + 16 + 32 + 72 + 88 + 1;
        let m = estimate_memory(&ModelConfig::tiny(), 4, 1);
        assert_eq!(m.activations, acts);
        assert_eq!(m.attention_scores, 32);
        assert_eq!(m.parameters, 3675);
        assert_eq!(m.total(), 4 * 3675 + acts);
    }

    #[test]
    fn batch_linearity_and_quadratic_scores() {
        let c = ModelConfig::small();
        let a = estimate_memory(&c, 64, 4);
        let b = estimate_memory(&c, 64, 8);
        assert_eq!(b.activations - 1, 2 * (a.activations - 1));
        assert_eq!(a.fixed(), b.fixed());
        let long = estimate_memory(&c, 128, 4);
        assert_eq!(long.attention_scores, 4 * a.attention_scores);
    }

    #[test]
    fn capacity_boundary() {
        let c = ModelConfig::small();
        let exact = estimate_memory(&c, 128, 1).total();
        assert_eq!(max_tokens_at_capacity(&c, 128, exact).unwrap(), 128);
        assert!(matches!(max_tokens_at_capacity(&c, 128, exact - 1), Err(Error::Capacity(_))));
    }
}
