use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_frac: f64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            warmup_frac: 0.01,
            min_lr_ratio: 0.1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..1.0).contains(&x);
        if !(self.lr > 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        if !unit(self.warmup_frac) || !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("warmup_frac in [0, 1) and min_lr_ratio in [0, 1] required".into()));
        }
        Ok(())
    }

    /// Learning rate once `frac` of the global budget has been consumed
    /// (counting the step about to run).
    pub fn lr_at(&self, frac: f64) -> f64 {
        let frac = frac.clamp(0.0, 1.0);
        let floor = self.lr * self.min_lr_ratio;
        if frac < self.warmup_frac {
            return self.lr * frac / self.warmup_frac;
        }
        let span = 1.0 - self.warmup_frac;
        let p = if span > 0.0 { (frac - self.warmup_frac) / span } else { 1.0 };
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// AdamW with decoupled weight decay on matrices (not on biases or norm gains).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: OptimizerConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        let tensors = params.tensors();
        Self {
            m: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            v: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            decay: tensors.iter().map(|t| t.shape().len() >= 2).collect(),
            config,
            step: 0,
        }
    }

    /// Rebuilds from saved moments.
    pub fn from_parts(
        config: OptimizerConfig,
        params: &ModelParams,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
        step: u64,
    ) -> Result<Self> {
        let mut opt = Self::new(config, params);
        let ok = |xs: &[Vec<f32>]| xs.len() == opt.m.len() && xs.iter().zip(&opt.m).all(|(a, b)| a.len() == b.len());
        if !ok(&m) || !ok(&v) {
            return Err(Error::Format("optimizer moments do not match parameter shapes".into()));
        }
        opt.m = m;
        opt.v = v;
        opt.step = step;
        Ok(opt)
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// Applies one update; `grads` follow the canonical parameter order.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[&[f32]], lr: f64) -> Result<UpdateStats> {
        if grads.len() != self.m.len() {
            return Err(Error::Dimension {
                op: "adamw",
                lhs: vec![self.m.len()],
                rhs: vec![grads.len()],
            });
        }
        let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|&x| x as f64 * x as f64).sum();
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric("gradient norm".into()));
        }
        let c = &self.config;
        let clipped = c.grad_clip > 0.0 && grad_norm > c.grad_clip;
        let gscale = if clipped { (c.grad_clip / grad_norm) as f32 } else { 1.0 };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let step_size = (lr / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        let (b1, b2, eps) = (c.beta1 as f32, c.beta2 as f32, c.eps as f32);
        let decay_factor = (1.0 - lr * c.weight_decay) as f32;

        for (i, p) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i];
            if g.len() != p.numel() {
                return Err(Error::Dimension {
                    op: "adamw",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let decay = self.decay[i];
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * gscale;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                if decay {
                    *w *= decay_factor;
                }
                *w -= step_size * *mi / (vi.sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(UpdateStats { grad_norm, clipped })
    }
}
