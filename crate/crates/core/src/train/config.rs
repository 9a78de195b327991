//! Training configuration, read from TOML.
//!
//! ```toml
//! stage = "online"
//! seed = 7
//! epochs = 500
//! learning_rate = 0.001
//! vocab = "vocab.txt"
//! scenarios = ["web_admin.json"]
//!
//! [policy]
//! embed_dim = 32
//!
//! [grpo]
//! clip_epsilon = 0.2
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::OptimizerConfig;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::PolicyConfig;
use crate::rewards::{OfflineRewardConfig, OnlineRewardSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Offline,
    Online,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Offline => "offline",
            Stage::Online => "online",
        })
    }
}

/// Model shape; the vocabulary size comes from the vocabulary file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub context_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Seed of the frozen base weights.
    pub base_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            embed_dim: p.embed_dim,
            context_len: p.context_len,
            n_layers: p.n_layers,
            n_heads: p.n_heads,
            lora_rank: p.lora_rank,
            lora_alpha: p.lora_alpha,
            base_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn policy_config(&self, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            context_len: self.context_len,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub offline: OfflineRewardConfig,
    pub online: OnlineRewardSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub seed: u64,
    /// Completions per context (offline) or trajectories per prompt (online).
    pub group_size: usize,
    /// Contexts per update; the online stage always uses one prompt.
    pub batch_contexts: usize,
    pub epochs: usize,
    pub t_max: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub temperature: f64,
    /// Maximum sampled tokens per response.
    pub response_cap: usize,
    /// Adds the expert completion to every offline group.
    pub reference_in_group: bool,
    /// Updates per window of the rolling success rate.
    pub success_window: usize,
    /// Write a checkpoint every N updates; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub vocab: Option<PathBuf>,
    pub tuples: Option<PathBuf>,
    pub scenarios: Vec<PathBuf>,
    pub policy: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub grpo: GrpoConfig,
    pub rewards: RewardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Offline,
            seed: 0,
            group_size: 4,
            batch_contexts: 16,
            epochs: 2,
            t_max: 8,
            learning_rate: 1e-3,
            warmup_ratio: 0.03,
            temperature: 0.6,
            response_cap: 64,
            reference_in_group: false,
            success_window: 10,
            checkpoint_every: 0,
            vocab: None,
            tuples: None,
            scenarios: Vec::new(),
            policy: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            grpo: GrpoConfig::default(),
            rewards: RewardConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for `stage`: one prompt per online update.
    pub fn for_stage(stage: Stage) -> Self {
        let batch_contexts = match stage {
            Stage::Offline => 16,
            Stage::Online => 1,
        };
        Self { stage, batch_contexts, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let stage = match value.get("stage").and_then(|s| s.as_str()) {
            Some("online") => Stage::Online,
            _ => Stage::Offline,
        };
        let mut merged = toml::Value::try_from(Self::for_stage(stage)).expect("config serializes");
        merge(&mut merged, value);
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    /// Loads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.vocab.iter_mut().for_each(fix);
        self.tuples.iter_mut().for_each(fix);
        self.scenarios.iter_mut().for_each(fix);
    }

    /// Applies a `key=value` override; dotted keys address nested tables.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .map(|mut t| t.remove("v").expect("key present"))
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        let mut tree = toml::Value::try_from(&*self).expect("config serializes");
        let mut slot = &mut tree;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot.as_table_mut().ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) && !is_optional_key(key) {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            slot = table.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown key {key}")))?;
        }
        *self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    pub fn total_updates(&self, contexts: usize) -> usize {
        match self.stage {
            Stage::Offline => self.epochs * contexts.div_ceil(self.batch_contexts.max(1)),
            Stage::Online => self.epochs * contexts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.batch_contexts == 0 {
            return bad("batch_contexts must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.t_max == 0 {
            return bad("t_max must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.response_cap == 0 {
            return bad("response_cap must be positive");
        }
        if self.success_window == 0 {
            return bad("success_window must be positive");
        }
        if self.stage == Stage::Online && self.batch_contexts != 1 {
            return bad("online updates use one prompt (batch_contexts = 1)");
        }
        self.grpo.validate()?;
        Ok(())
    }
}

/// Keys that are absent from the serialized defaults because they are unset.
fn is_optional_key(key: &str) -> bool {
    matches!(key, "vocab" | "tuples")
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
