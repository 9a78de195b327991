//! Offline stage: group-relative updates on walkthrough tuples.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Stage, TrainConfig};
use super::metrics::{MetricsRow, MetricsSink};
use super::optim::{lr_at, optimizer_step, OptimizerState};
use super::rollout::{encode_expert, encode_tuple_context, expert_text, generate, Decode};
use super::{CheckpointWriter, TrainSummary};
use crate::error::{Error, Result};
use crate::grpo::{group_advantages, mean_std, offline_objective, Completion, Segment};
use crate::policy::{GradientSet, PolicyParameters};
use crate::rewards::{score_offline, Reference};
use crate::trajectory::TokenMask;
use crate::vocab::{Token, Vocab};
use crate::walkthrough::TrainTuple;

/// A tuple encoded for the policy.
#[derive(Debug, Clone)]
pub struct EncodedTuple {
    pub context: Vec<Token>,
    pub expert: Vec<Token>,
    pub reference: Reference,
}

pub fn encode_corpus(vocab: &Vocab, tuples: &[TrainTuple], context_len: usize) -> Result<Vec<EncodedTuple>> {
    tuples
        .iter()
        .map(|t| {
            let context = encode_tuple_context(vocab, t)?;
            if context.len() >= context_len {
                return Err(Error::ContextOverflow { len: context.len() + 1, max: context_len });
            }
            Ok(EncodedTuple {
                context,
                expert: encode_expert(vocab, t),
                reference: Reference::from_text(&expert_text(t)),
            })
        })
        .collect()
}

fn completion(context: &[Token], response: &[Token], context_len: usize) -> Result<Completion> {
    let mut stream = context.to_vec();
    stream.extend_from_slice(response);
    stream.truncate(context_len);
    let mut bits = vec![false; context.len()];
    bits.resize(stream.len(), true);
    Ok(Completion { segments: vec![Segment::new(stream, TokenMask::from_bits(bits))?] })
}

/// Runs `config.epochs` passes over shuffled batches of `tuples`. Each
/// context gets `group_size` sampled responses scored against the expert;
/// the batch loss is the mean of the per-context advantage-weighted losses.
pub fn train_offline(
    tuples: &[TrainTuple],
    params: &mut PolicyParameters,
    vocab: &Vocab,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
    checkpoints: Option<&CheckpointWriter>,
) -> Result<TrainSummary> {
    config.validate()?;
    if tuples.is_empty() {
        return Err(Error::Config("offline corpus has no tuples".into()));
    }
    let cfg = params.config;
    let corpus = encode_corpus(vocab, tuples, cfg.context_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = OptimizerState::new(params, config.optimizer);
    let total = config.total_updates(corpus.len());
    let decode = Decode::Sample { temperature: config.temperature };
    let start = Instant::now();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut update = 0;
    let mut last_loss = 0.0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_contexts) {
            let net = params.network();
            let mut grads = GradientSet::zeros_like(params);
            let mut loss = 0.0;
            let mut sampled_returns = Vec::with_capacity(batch.len() * config.group_size);
            for &i in batch {
                let item = &corpus[i];
                let mut group = Vec::with_capacity(config.group_size + 1);
                let mut returns = Vec::with_capacity(config.group_size + 1);
                for _ in 0..config.group_size {
                    let response = generate(&net, &item.context, config.response_cap, decode, &mut rng)?;
                    let text = vocab.detokenize(&response);
                    returns.push(score_offline(&text, &item.reference, &config.rewards.offline).total);
                    group.push(completion(&item.context, &response, cfg.context_len)?);
                }
                sampled_returns.extend_from_slice(&returns);
                if config.reference_in_group {
                    let text = vocab.detokenize(&item.expert);
                    returns.push(score_offline(&text, &item.reference, &config.rewards.offline).total);
                    group.push(completion(&item.context, &item.expert, cfg.context_len)?);
                }
                let adv = group_advantages(&returns, &config.grpo)?;
                if adv.advantages.iter().all(|a| *a == 0.0) {
                    continue;
                }
                let (l, g) = offline_objective(params, &group, &adv.advantages, config.temperature)?;
                loss += l;
                grads.add_scaled(&g, 1.0);
            }
            let scale = 1.0 / batch.len() as f64;
            loss *= scale;
            grads.scale(scale);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(update));
            }
            let lr = lr_at(update, total, config.learning_rate, config.warmup_ratio);
            if !grads.is_zero() {
                optimizer_step(params, &grads, &mut optimizer, lr, update)?;
            }
            let (mean_return, return_std) = mean_std(&sampled_returns);
            sink.record(&MetricsRow {
                stage: Stage::Offline,
                epoch,
                update,
                loss,
                mean_return,
                return_std,
                mean_ratio: 1.0,
                clip_fraction: 0.0,
                success_rate: None,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
            last_loss = loss;
            update += 1;
            if let Some(c) = checkpoints {
                c.maybe_write(update, params)?;
            }
        }
    }
    Ok(TrainSummary { updates: update, final_loss: last_loss, success_rate: None })
}
