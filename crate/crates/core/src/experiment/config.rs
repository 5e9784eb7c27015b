//! Strict TOML experiment configuration.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, CorpusFormat};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::rope::{RopeConfig, DEFAULT_BASE};
use crate::schedule::{build_schedule, equal_shares, BudgetKind, Schedule, StageBudget};
use crate::trainer::{OptimizerConfig, RunBudget, TrainConfig};

fn default_ffn_mult() -> usize {
    4
}

fn default_rope_base() -> f64 {
    DEFAULT_BASE
}

fn default_eval_fraction() -> f64 {
    0.1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_trials() -> usize {
    5
}

fn default_warmup() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelSection {
    pub fn to_model(&self, seed: u64) -> Result<ModelConfig> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "[model] d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        let head_dim = self.d_model / self.n_heads;
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim,
            ffn_mult: self.ffn_mult,
            rope: RopeConfig {
                base: self.rope_base,
                ..RopeConfig::new(head_dim)
            },
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Relative paths resolve against the config file's directory.
    pub corpus: PathBuf,
    #[serde(default)]
    pub format: CorpusFormat,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    pub tokens_per_batch: usize,
    /// Each arm runs once per seed; the seed drives both init and data order.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub lengths: Vec<usize>,
    /// Fractions of the run budget; equal shares when both forms are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shares: Option<Vec<f64>>,
    /// Absolute per-stage token counts (token budgets only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<u64>>,
}

impl ArmSpec {
    pub fn schedule(&self, kind: BudgetKind) -> Result<Schedule> {
        let r = match (&self.shares, &self.tokens) {
            (None, None) => equal_shares(&self.lengths, kind),
            (Some(s), None) => {
                let b: Vec<StageBudget> = s.iter().map(|&x| StageBudget::Share(x)).collect();
                build_schedule(&self.lengths, &b, kind)
            }
            (None, Some(t)) => {
                let b: Vec<StageBudget> = t.iter().map(|&x| StageBudget::Tokens(x)).collect();
                build_schedule(&self.lengths, &b, kind)
            }
            (Some(_), Some(_)) => Err(Error::Config("give shares or tokens, not both".into())),
        };
        r.map_err(|e| Error::Config(format!("arm `{}`: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default)]
    pub budget_kind: BudgetKind,
    /// Tokens or seconds per run.
    pub total: f64,
    #[serde(rename = "arm")]
    pub arms: Vec<ArmSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub lengths: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Live-value budget for the tokens-at-capacity column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_values: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub data: DataSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<ProfileSection>,
    pub output: OutputSection,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')) && s != "." && s != ".."
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form; stable across TOML formatting and key order.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn budget(&self) -> RunBudget {
        match self.schedule.budget_kind {
            BudgetKind::Tokens => RunBudget::Tokens(self.schedule.total as u64),
            BudgetKind::WallTime => RunBudget::Seconds(self.schedule.total),
        }
    }

    pub fn arm(&self, name: &str) -> Result<&ArmSpec> {
        self.schedule
            .arms
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Config(format!("no arm named `{name}`")))
    }

    pub fn train_config(&self, arm: &ArmSpec, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            model: self.model.to_model(seed)?,
            optimizer: self.optimizer.clone(),
            schedule: arm.schedule(self.schedule.budget_kind)?,
            budget: self.budget(),
            tokens_per_batch: self.data.tokens_per_batch,
            data_seed: seed,
            record_wall_time: self.data.record_wall_time,
        };
        cfg.validate().map_err(|e| Error::Config(format!("arm `{}`: {e}", arm.name)))?;
        Ok(cfg)
    }

    /// Cross-field checks that the TOML schema alone cannot express.
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(s.total > 0.0) || !s.total.is_finite() {
            return Err(Error::Config(format!("[schedule] total must be positive, got {}", s.total)));
        }
        if s.budget_kind == BudgetKind::Tokens && s.total.fract() != 0.0 {
            return Err(Error::Config("[schedule] token total must be an integer".into()));
        }
        if self.data.seeds.is_empty() {
            return Err(Error::Config("[data] seeds must not be empty".into()));
        }
        if self.data.seeds.iter().collect::<BTreeSet<_>>().len() != self.data.seeds.len() {
            return Err(Error::Config("[data] seeds must be distinct".into()));
        }
        if !(self.data.eval_fraction > 0.0 && self.data.eval_fraction < 1.0) {
            return Err(Error::Config("[data] eval_fraction must lie in (0, 1)".into()));
        }
        if s.arms.is_empty() {
            return Err(Error::Config("[schedule] needs at least one [[schedule.arm]]".into()));
        }
        let mut names = BTreeSet::new();
        for arm in &s.arms {
            if !valid_name(&arm.name) {
                return Err(Error::Config(format!(
                    "arm name `{}` must be non-empty [A-Za-z0-9_.-]",
                    arm.name
                )));
            }
            if !names.insert(arm.name.as_str()) {
                return Err(Error::Config(format!("duplicate arm name `{}`", arm.name)));
            }
            self.train_config(arm, self.data.seeds[0])?;
        }
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        if let Some(p) = &self.profile {
            if p.lengths.is_empty() {
                return Err(Error::Config("[profile] lengths must not be empty".into()));
            }
            if let Some(&l) = p.lengths.iter().find(|&&l| l == 0 || self.data.tokens_per_batch % l != 0) {
                return Err(Error::Config(format!(
                    "[profile] length {l} does not divide tokens_per_batch {}",
                    self.data.tokens_per_batch
                )));
            }
        }
        Ok(())
    }
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.config.data.corpus)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output.dir)
    }
}

/// Reads and validates a config file. Errors name the file; parse errors
/// also carry the line and column.
pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config = ExperimentConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(LoadedConfig {
        config,
        path: path.to_path_buf(),
        base_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
vocab_size = 256
d_model = 16
n_layers = 1
n_heads = 2

[data]
corpus = "c.bin"
tokens_per_batch = 64
seeds = [1, 2]

[schedule]
total = 6400

[[schedule.arm]]
name = "grow"
lengths = [8, 16, 32]

[[schedule.arm]]
name = "fixed"
lengths = [32]

[output]
dir = "out"
"#;

    #[test]
    fn parses_and_round_trips() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(c.schedule.arms.len(), 2);
        assert_eq!(c.model.ffn_mult, 4);
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.digest(), c.digest());
    }

    #[test]
    fn unknown_key_is_named() {
        let text = BASE.replace("n_heads = 2", "n_heads = 2\nn_hedas = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("n_hedas"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn cross_field_checks() {
        let bad = BASE.replace("tokens_per_batch = 64", "tokens_per_batch = 48");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("grow"), "{err}");
        let bad = BASE.replace("[8, 16, 32]", "[16, 8]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = BASE.replace("name = \"fixed\"", "name = \"grow\"");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = BASE.replace("total = 6400", "total = 6400.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn digest_ignores_formatting() {
        let spaced = BASE.replace("total = 6400", "total    =   6400  # tokens");
        assert_eq!(
            ExperimentConfig::from_toml(&spaced).unwrap().digest(),
            ExperimentConfig::from_toml(BASE).unwrap().digest()
        );
    }
}
