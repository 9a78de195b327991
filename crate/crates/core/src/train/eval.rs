//! Evaluation without learning: greedy command prediction on tuples and
//! rollouts in the simulator.

use super::offline::encode_corpus;
use super::rollout::{generate, run_episode, Actor, Decode, Episode, EpisodeConfig};
use crate::error::Result;
use crate::policy::Network;
use crate::rewards::first_command;
use crate::sim::Scenario;
use crate::vocab::Vocab;
use crate::walkthrough::TrainTuple;

/// Share of tuples whose greedy response carries exactly the expert's
/// command line.
pub fn exact_command_rate(net: &Network, vocab: &Vocab, tuples: &[TrainTuple], cap: usize) -> Result<f64> {
    if tuples.is_empty() {
        return Ok(0.0);
    }
    let corpus = encode_corpus(vocab, tuples, net.config().context_len)?;
    // Greedy decoding draws no randomness.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut hits = 0;
    for item in &corpus {
        let response = generate(net, &item.context, cap, Decode::Greedy, &mut rng)?;
        let got = first_command(&vocab.detokenize(&response));
        if got.is_some() && got == item.reference.command {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<Episode>,
}

impl EvalReport {
    pub fn successes(&self) -> usize {
        self.episodes.iter().filter(|e| e.captured()).count()
    }

    pub fn mean_return(&self) -> f64 {
        self.episodes.iter().map(|e| e.episode_return.value).sum::<f64>() / self.episodes.len().max(1) as f64
    }

    pub fn mean_length(&self) -> f64 {
        self.episodes.iter().map(|e| e.trajectory.assistant_turns() as f64).sum::<f64>()
            / self.episodes.len().max(1) as f64
    }
}

/// Runs `episodes` independent rollouts with `actor`.
pub fn evaluate(
    scenario: &Scenario,
    vocab: &Vocab,
    actor: &mut dyn Actor,
    episodes: usize,
    config: &EpisodeConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<EvalReport> {
    let episodes = (0..episodes)
        .map(|_| run_episode(scenario, vocab, actor, config, rng))
        .collect::<Result<_>>()?;
    Ok(EvalReport { episodes })
}
