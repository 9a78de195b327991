//! Online stage: rollouts in the simulator and clipped multi-turn updates.

use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Stage, TrainConfig};
use super::metrics::{MetricsRow, MetricsSink};
use super::optim::{lr_at, optimizer_step, OptimizerState};
use super::rollout::{collect_trajectory, EpisodeConfig};
use super::{CheckpointWriter, TrainSummary};
use crate::error::{Error, Result};
use crate::grpo::{grpo_update, RolloutBatch};
use crate::policy::PolicyParameters;
use crate::sim::Scenario;
use crate::trajectory::Terminal;
use crate::vocab::Vocab;

/// Success rate over the most recent `window` updates.
#[derive(Debug, Clone)]
pub struct RollingSuccess {
    window: usize,
    recent: VecDeque<(usize, usize)>,
}

impl RollingSuccess {
    pub fn new(window: usize) -> Self {
        Self { window, recent: VecDeque::with_capacity(window) }
    }

    pub fn push(&mut self, successes: usize, episodes: usize) -> f64 {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back((successes, episodes));
        let (s, n) = self.recent.iter().fold((0, 0), |(a, b), (s, n)| (a + s, b + n));
        s as f64 / n.max(1) as f64
    }
}

pub fn episode_config(config: &TrainConfig, context_len: usize) -> EpisodeConfig {
    EpisodeConfig {
        t_max: config.t_max,
        context_len,
        response_cap: config.response_cap,
        schedule: config.rewards.online,
    }
}

/// Each epoch visits every scenario once; a visit
/// snapshots the policy, samples `group_size` trajectories from the
/// snapshot, and applies one clipped update. Optimizer moments start fresh.
pub fn train_online(
    scenarios: &[Scenario],
    params: &mut PolicyParameters,
    vocab: &Vocab,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
    checkpoints: Option<&CheckpointWriter>,
) -> Result<TrainSummary> {
    config.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Config("online training needs at least one scenario".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = OptimizerState::new(params, config.optimizer);
    let total = config.total_updates(scenarios.len());
    let episode = episode_config(config, params.config.context_len);
    let mut rolling = RollingSuccess::new(config.success_window);
    let start = Instant::now();
    let mut update = 0;
    let mut last = (0.0, 0.0);
    for epoch in 0..config.epochs {
        for scenario in scenarios {
            let snapshot = params.network().with_temperature(config.temperature)?;
            let items = (0..config.group_size)
                .map(|_| collect_trajectory(scenario, &snapshot, vocab, &episode, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let successes = items.iter().filter(|i| i.trajectory.terminal() == Terminal::FlagCaptured).count();
            let batch = RolloutBatch { prompt_id: scenario.id.clone(), items, temperature: config.temperature };
            let (grads, diag) = grpo_update(params, &batch, &config.grpo)?;
            if !diag.loss.is_finite() {
                return Err(Error::NonFiniteLoss(update));
            }
            let lr = lr_at(update, total, config.learning_rate, config.warmup_ratio);
            if !grads.is_zero() {
                optimizer_step(params, &grads, &mut optimizer, lr, update)?;
            }
            let success_rate = rolling.push(successes, batch.items.len());
            sink.record(&MetricsRow {
                stage: Stage::Online,
                epoch,
                update,
                loss: diag.loss,
                mean_return: diag.mean_return,
                return_std: diag.return_std,
                mean_ratio: diag.mean_ratio,
                clip_fraction: diag.clip_fraction,
                success_rate: Some(success_rate),
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
            last = (diag.loss, success_rate);
            update += 1;
            if let Some(c) = checkpoints {
                c.maybe_write(update, params)?;
            }
        }
    }
    Ok(TrainSummary { updates: update, final_loss: last.0, success_rate: Some(last.1) })
}
