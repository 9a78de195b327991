//! Token layout shared by both stages, response generation and episode
//! collection in the simulator.
//!
//! A trajectory flattens to
//!
//! ```text
//! BOS prompt | HDR 1 <think> … </think> $ cmd EOS | OBS observation | HDR 2 …
//! ```
//!
//! where `|` separates turns: the prompt and observations are user turns and
//! each response, starting with its own step header, is an assistant turn.
//! Offline contexts are encoded in the same layout, so a policy trained on
//! walkthroughs sees the same streams online.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grpo::{RolloutItem, Segment};
use crate::policy::{argmax_token, sample_token, Network};
use crate::rewards::{score_step, terminal_adjust, OnlineRewardSchedule};
use crate::sim::{parse_action, reset, step, Scenario};
use crate::trajectory::{build_mask, total_return, EpisodeReturn, TokenMask, Trajectory, Turn};
use crate::vocab::{is_structural, step_header, Token, Vocab, BOS, EOS, OBS_MARK, UNK};
use crate::walkthrough::{generate_walkthrough, render_target, TrainTuple, WalkthroughDoc};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decode {
    Sample { temperature: f64 },
    Greedy,
}

/// Generates up to `cap` tokens after `context`, stopping after EOS or when
/// the stream reaches the context length.
pub fn generate(net: &Network, context: &[Token], cap: usize, decode: Decode, rng: &mut impl Rng) -> Result<Vec<Token>> {
    let limit = net.config().context_len;
    if context.len() >= limit {
        return Err(Error::ContextOverflow { len: context.len() + 1, max: limit });
    }
    let mut decoder = net.decoder();
    let mut logits = Vec::new();
    for &t in context {
        logits = decoder.push(t)?;
    }
    let cap = cap.min(limit - context.len());
    let mut out = Vec::with_capacity(cap);
    while out.len() < cap {
        let next = match decode {
            Decode::Sample { temperature } => sample_token(&logits, temperature, rng)?,
            Decode::Greedy => argmax_token(&logits)?,
        };
        out.push(next);
        if next == EOS || out.len() == cap {
            break;
        }
        logits = decoder.push(next)?;
    }
    Ok(out)
}

/// Keeps the first `keep` tokens (the prompt turn) and as many of the most
/// recent remaining tokens as fit in `limit`.
pub fn truncate_context(stream: &[Token], keep: usize, limit: usize) -> Result<Vec<Token>> {
    if keep > limit {
        return Err(Error::ContextOverflow { len: keep, max: limit });
    }
    if stream.len() <= limit {
        return Ok(stream.to_vec());
    }
    let tail = limit - keep;
    let mut out = stream[..keep].to_vec();
    out.extend_from_slice(&stream[stream.len() - tail..]);
    Ok(out)
}

fn header_tokens(vocab: &Vocab, step: usize) -> Vec<Token> {
    vocab.tokenize(&step_header(step))
}

/// Policy input for a walkthrough tuple: the tuple context without its
/// final step header (the response produces it), with EOS closing every
/// earlier response.
pub fn encode_tuple_context(vocab: &Vocab, tuple: &TrainTuple) -> Result<Vec<Token>> {
    let mut tokens = vec![BOS];
    for t in vocab.tokenize(&tuple.context) {
        if t == OBS_MARK {
            tokens.push(EOS);
        }
        tokens.push(t);
    }
    let header = header_tokens(vocab, tuple.step);
    if !tokens.ends_with(&header) {
        return Err(Error::Shape(format!("tuple {} step {} does not end with its step header", tuple.doc_id, tuple.step)));
    }
    tokens.truncate(tokens.len() - header.len());
    Ok(tokens)
}

/// The expert response for a tuple: step header, target and EOS.
pub fn encode_expert(vocab: &Vocab, tuple: &TrainTuple) -> Vec<Token> {
    let mut tokens = vocab.tokenize(&format!("{}\n{}", step_header(tuple.step), tuple.target));
    tokens.push(EOS);
    tokens
}

/// Observation tokens; markers echoed back by the environment (for example
/// in "command not found: <think>") become UNK so a user turn never carries
/// structure.
pub fn encode_observation(vocab: &Vocab, text: &str) -> Vec<Token> {
    vocab.tokenize(text).into_iter().map(|t| if is_structural(t) { UNK } else { t }).collect()
}

/// Produces one response per environment step.
pub trait Actor {
    fn respond(&mut self, context: &[Token], step: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Token>>;
}

pub struct PolicyActor<'a> {
    pub net: &'a Network,
    pub decode: Decode,
    pub cap: usize,
}

impl Actor for PolicyActor<'_> {
    fn respond(&mut self, context: &[Token], _step: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Token>> {
        generate(self.net, context, self.cap, self.decode, &mut &mut *rng)
    }
}

/// Replays fixed responses, one per step; once the script runs out the
/// last response repeats.
pub struct ScriptedActor {
    responses: Vec<Vec<Token>>,
}

impl ScriptedActor {
    /// Command lines in walkthrough format; each thought names the tool.
    pub fn new(vocab: &Vocab, commands: &[String]) -> Self {
        let responses = commands
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let tool = c.split_whitespace().next().unwrap_or_default();
                let mut t = vocab.tokenize(&format!("{}\n<think>{tool}</think>\n$ {c}", step_header(i + 1)));
                t.push(EOS);
                t
            })
            .collect();
        Self { responses }
    }

    pub fn from_responses(responses: Vec<Vec<Token>>) -> Self {
        Self { responses }
    }

    /// The expert responses of a walkthrough, in order.
    pub fn from_doc(vocab: &Vocab, doc: &WalkthroughDoc) -> Self {
        let responses = doc
            .steps
            .iter()
            .map(|s| {
                let mut t = vocab.tokenize(&format!("{}\n{}", step_header(s.step_index), render_target(s)));
                t.push(EOS);
                t
            })
            .collect();
        Self { responses }
    }

    /// Follows the scenario solver's path, then submits the flag.
    pub fn solver(vocab: &Vocab, scenario: &Scenario) -> Result<Self> {
        Ok(Self::from_doc(vocab, &generate_walkthrough(scenario, 0)?))
    }
}

impl Actor for ScriptedActor {
    fn respond(&mut self, _context: &[Token], step: usize, _rng: &mut dyn rand::RngCore) -> Result<Vec<Token>> {
        let i = (step - 1).min(self.responses.len().saturating_sub(1));
        self.responses.get(i).cloned().ok_or_else(|| Error::Config("empty script".into()))
    }
}

/// Settings of a single episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeConfig {
    pub t_max: usize,
    pub context_len: usize,
    pub response_cap: usize,
    pub schedule: OnlineRewardSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub episode_return: EpisodeReturn,
    /// Windows that produced each response, or the whole stream when it fits.
    pub segments: Vec<Segment>,
}

impl Episode {
    pub fn captured(&self) -> bool {
        self.trajectory.terminal() == crate::trajectory::Terminal::FlagCaptured
    }
}

/// Runs one episode: each step renders the truncated history, asks the
/// actor for a response, parses and executes it, and appends the
/// observation as a user turn.
pub fn run_episode(
    scenario: &Scenario,
    vocab: &Vocab,
    actor: &mut dyn Actor,
    config: &EpisodeConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<Episode> {
    let (mut state, prompt) = reset(scenario, config.t_max);
    let mut prompt_tokens = vec![BOS];
    prompt_tokens.extend(vocab.tokenize(&prompt));
    let keep = prompt_tokens.len();
    let reserve = config.response_cap.min(config.context_len.saturating_sub(keep + 1)).max(1);
    let mut trajectory = Trajectory::new();
    trajectory.push(Turn::user(prompt_tokens, 0)?)?;
    let mut windows = Vec::new();
    let mut rewards = Vec::new();
    let mut step_index = 0;
    while !state.done {
        step_index += 1;
        let context = truncate_context(&trajectory.flatten(), keep, config.context_len - reserve)?;
        let response = actor.respond(&context, step_index, rng)?;
        let text = vocab.detokenize(&response);
        let action = parse_action(&text, &scenario.lexicon);
        let (next, outcome) = step(scenario, &state, &action)?;
        state = next;
        rewards.push(score_step(&outcome, &config.schedule));
        let mut stream = context.clone();
        stream.extend_from_slice(&response);
        let mut bits = vec![false; context.len()];
        bits.resize(stream.len(), true);
        windows.push(Segment::new(stream, TokenMask::from_bits(bits))?);
        trajectory.push(Turn::assistant(response, step_index)?)?;
        let mut obs = vec![OBS_MARK];
        obs.extend(encode_observation(vocab, &outcome.observation));
        trajectory.push(Turn::user(obs, step_index)?)?;
    }
    trajectory.finish(state.terminal);
    *rewards.last_mut().expect("at least one step") += terminal_adjust(state.terminal, &config.schedule)?;
    let flat = trajectory.flatten();
    let segments = if flat.len() <= config.context_len {
        vec![Segment::new(flat, build_mask(&trajectory)?)?]
    } else {
        windows
    };
    Ok(Episode { trajectory, episode_return: total_return(&rewards)?, segments })
}

/// Samples one trajectory from `snapshot` at its scoring temperature and
/// records the old-policy log-probabilities under the same distribution.
pub fn collect_trajectory(
    scenario: &Scenario,
    snapshot: &Network,
    vocab: &Vocab,
    config: &EpisodeConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<RolloutItem> {
    let decode = Decode::Sample { temperature: snapshot.temperature() };
    let mut actor = PolicyActor { net: snapshot, decode, cap: config.response_cap };
    let episode = run_episode(scenario, vocab, &mut actor, config, rng)?;
    let old_token_logprobs = episode
        .segments
        .iter()
        .map(|s| snapshot.token_logprobs(&s.stream, &s.mask))
        .collect::<Result<_>>()?;
    Ok(RolloutItem {
        trajectory: episode.trajectory,
        episode_return: episode.episode_return,
        segments: episode.segments,
        old_token_logprobs,
    })
}

/// Expert response text for a tuple (header plus target).
pub fn expert_text(tuple: &TrainTuple) -> String {
    format!("{}\n{}", step_header(tuple.step), tuple.target)
}
