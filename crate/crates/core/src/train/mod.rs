//! Both training stages, the optimizer and the metrics sink.

mod config;
mod eval;
mod metrics;
mod offline;
mod online;
mod optim;
mod rollout;

use std::path::{Path, PathBuf};

pub use config::{ModelConfig, RewardConfig, Stage, TrainConfig};
pub use eval::{evaluate, exact_command_rate, EvalReport};
pub use metrics::{read_metrics, strip_wall_clock, CsvSink, MetricsRow, MetricsSink, METRICS_COLUMNS};
pub use offline::{encode_corpus, train_offline, EncodedTuple};
pub use online::{episode_config, train_online, RollingSuccess};
pub use optim::{lr_at, optimizer_step, warmup_updates, OptimizerConfig, OptimizerState};
pub use rollout::{
    collect_trajectory, encode_expert, encode_observation, encode_tuple_context, expert_text, generate, run_episode, truncate_context, Actor,
    Decode, Episode, EpisodeConfig, PolicyActor, ScriptedActor,
};

use crate::error::Result;
use crate::policy::{save_checkpoint, PolicyParameters};
use crate::sim::{Scenario, FLAG_ACCEPTED, FLAG_REJECTED, NOTHING_NEW};
use crate::vocab::Vocab;
use crate::walkthrough::TrainTuple;

/// File name of the vocabulary stored next to checkpoint arrays.
pub const CHECKPOINT_VOCAB: &str = "vocab.txt";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSummary {
    pub updates: usize,
    pub final_loss: f64,
    /// Rolling success rate after the last update (online only).
    pub success_rate: Option<f64>,
}

/// Writes `checkpoint-NNNNN` directories every `every` updates.
pub struct CheckpointWriter {
    pub dir: PathBuf,
    pub every: usize,
    pub vocab: Vocab,
}

impl CheckpointWriter {
    pub fn maybe_write(&self, updates_done: usize, params: &PolicyParameters) -> Result<()> {
        if self.every > 0 && updates_done.is_multiple_of(self.every) {
            self.write(&self.dir.join(format!("checkpoint-{updates_done:05}")), params)?;
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path, params: &PolicyParameters) -> Result<()> {
        write_checkpoint(dir, params, &self.vocab)
    }
}

/// Saves parameters together with the vocabulary they were trained on.
pub fn write_checkpoint(dir: &Path, params: &PolicyParameters, vocab: &Vocab) -> Result<()> {
    save_checkpoint(params, dir)?;
    vocab.save(&dir.join(CHECKPOINT_VOCAB))
}

/// Largest step number a vocabulary must spell: walkthrough steps and the
/// online step budget.
pub fn max_step(tuples: &[TrainTuple], t_max: usize) -> usize {
    tuples.iter().map(|t| t.step).max().unwrap_or(0).max(t_max)
}

/// Vocabulary over tuple texts, scenario texts and simulator messages.
pub fn build_vocab(tuples: &[TrainTuple], scenarios: &[Scenario], max_step: usize) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    for t in tuples {
        texts.push(t.context.clone());
        texts.push(t.target.clone());
    }
    for s in scenarios {
        texts.extend(s.texts());
    }
    if !scenarios.is_empty() {
        texts.extend([FLAG_ACCEPTED, FLAG_REJECTED, NOTHING_NEW, "error: no command"].map(String::from));
    }
    Vocab::build(texts.iter().map(String::as_str), max_step)
}
