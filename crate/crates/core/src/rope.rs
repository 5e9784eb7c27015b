//! Rotary position embeddings.
//!
//! Queries and keys are split into adjacent coordinate pairs `(x[2i], x[2i+1])`
//! and each pair is rotated by `m * theta_i` where `m` is the token position and
//! `theta_i = base^(-2i / head_dim)`. Because both sides are rotated, the
//! query/key inner product only sees the offset `m - n`.
//!
//! Position interpolation rescales positions to `m / factor` so a longer
//! window maps into the angular range seen during training. Extrapolation needs
//! no special handling: it is just a larger unscaled table.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RopeScaling {
    #[default]
    None,
    Interpolation { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    #[serde(default)]
    pub scaling: RopeScaling,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            base: DEFAULT_BASE,
            scaling: RopeScaling::None,
        }
    }

    pub fn with_scaling(mut self, scaling: RopeScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base > 1.0) || !self.base.is_finite() {
            return Err(Error::Config(format!("rotary base must exceed 1, got {}", self.base)));
        }
        if let RopeScaling::Interpolation { factor } = self.scaling {
            if !(factor > 1.0) || !factor.is_finite() {
                return Err(Error::Config(format!(
                    "interpolation factor must exceed 1, got {factor}"
                )));
            }
        }
        Ok(())
    }

    fn position_scale(&self) -> f64 {
        match self.scaling {
            RopeScaling::None => 1.0,
            RopeScaling::Interpolation { factor } => factor,
        }
    }
}

/// Per-pair rotation frequencies `base^(-2i / head_dim)` for `i in 0..head_dim/2`.
pub fn frequencies(config: &RopeConfig) -> Vec<f64> {
    let dim = config.head_dim as f64;
    (0..config.head_dim / 2)
        .map(|i| config.base.powf(-(2.0 * i as f64) / dim))
        .collect()
}

/// Precomputed cos/sin values, row-major `[max_position × head_dim/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    config: RopeConfig,
    max_position: usize,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

pub fn build_table(config: &RopeConfig, max_position: usize) -> Result<RopeTable> {
    config.validate()?;
    if max_position == 0 {
        return Err(Error::Config("rotary table needs max_position >= 1".into()));
    }
    let freqs = frequencies(config);
    let half = freqs.len();
    let scale = config.position_scale();
    let mut cos = Vec::with_capacity(max_position * half);
    let mut sin = Vec::with_capacity(max_position * half);
    for m in 0..max_position {
        let pos = m as f64 / scale;
        for &theta in &freqs {
            let (s, c) = (pos * theta).sin_cos();
            cos.push(c as f32);
            sin.push(s as f32);
        }
    }
    Ok(RopeTable {
        config: *config,
        max_position,
        cos,
        sin,
    })
}

impl RopeTable {
    pub fn config(&self) -> &RopeConfig {
        &self.config
    }

    pub fn max_position(&self) -> usize {
        self.max_position
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim
    }

    pub fn half_dim(&self) -> usize {
        self.config.head_dim / 2
    }

    pub fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.max_position {
            return Err(Error::Range {
                position,
                max_position: self.max_position,
            });
        }
        Ok(())
    }

    /// `(cos, sin)` rows for one position. Panics if out of range; callers on
    /// the hot path check the extent once per sequence.
    #[inline]
    pub fn row(&self, position: usize) -> (&[f32], &[f32]) {
        let half = self.half_dim();
        let start = position * half;
        (&self.cos[start..start + half], &self.sin[start..start + half])
    }

    /// Rotates one head-sized vector in place.
    #[inline]
    pub fn rotate(&self, x: &mut [f32], position: usize) {
        let (cos, sin) = self.row(position);
        for ((pair, &c), &s) in x.chunks_exact_mut(2).zip(cos).zip(sin) {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c - x1 * s;
            pair[1] = x0 * s + x1 * c;
        }
    }

    /// Inverse rotation (transpose of [`RopeTable::rotate`]).
    #[inline]
    pub fn rotate_inverse(&self, x: &mut [f32], position: usize) {
        let (cos, sin) = self.row(position);
        for ((pair, &c), &s) in x.chunks_exact_mut(2).zip(cos).zip(sin) {
            let (x0, x1) = (pair[0], pair[1]);
            pair[0] = x0 * c + x1 * s;
            pair[1] = -x0 * s + x1 * c;
        }
    }
}

pub fn apply_rotary(vec: &[f32], position: usize, table: &RopeTable) -> Result<Vec<f32>> {
    if vec.len() != table.head_dim() {
        return Err(Error::Dimension {
            op: "apply_rotary",
            lhs: vec![vec.len()],
            rhs: vec![table.head_dim()],
        });
    }
    table.check_position(position)?;
    let mut out = vec.to_vec();
    table.rotate(&mut out, position);
    Ok(out)
}

/// Inner product of `q` rotated to position `m` and `k` rotated to `n`.
///
/// Accumulates in f64 so that shift comparisons are limited by the table's
/// f32 rounding rather than by summation order.
pub fn relative_score(q: &[f32], k: &[f32], m: usize, n: usize, table: &RopeTable) -> Result<f64> {
    let qm = apply_rotary(q, m, table)?;
    let kn = apply_rotary(k, n, table)?;
    Ok(qm
        .iter()
        .zip(&kn)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct TableKey {
    head_dim: usize,
    base_bits: u64,
    factor_bits: Option<u64>,
    max_position: usize,
}

/// Memoizes tables per `(config, max_position)`.
#[derive(Debug, Default)]
pub struct RopeCache {
    tables: HashMap<TableKey, Arc<RopeTable>>,
}

impl RopeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, config: &RopeConfig, max_position: usize) -> Result<Arc<RopeTable>> {
        let key = TableKey {
            head_dim: config.head_dim,
            base_bits: config.base.to_bits(),
            factor_bits: match config.scaling {
                RopeScaling::None => None,
                RopeScaling::Interpolation { factor } => Some(factor.to_bits()),
            },
            max_position,
        };
        if let Some(t) = self.tables.get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(build_table(config, max_position)?);
        self.tables.insert(key, Arc::clone(&table));
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}
