//! Turns, trajectories, role masks and episode returns.
//!
//! A trajectory starts with the task prompt as a user turn and then
//! alternates between assistant actions and user (environment) observations.
//! The flattened token stream is turn order then intra-turn order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Token, Vocab, OBS_MARK, THINK_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Assistant,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    role: Role,
    tokens: Vec<Token>,
    step: usize,
}

impl Turn {
    pub fn new(role: Role, tokens: Vec<Token>, step: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidTurn("empty token sequence".into()));
        }
        let forbidden = match role {
            Role::Assistant => OBS_MARK,
            Role::User => THINK_OPEN,
        };
        if tokens.contains(&forbidden) {
            return Err(Error::InvalidTurn(format!(
                "{role:?} turn at step {step} contains reserved token {forbidden}"
            )));
        }
        Ok(Self { role, tokens, step })
    }

    pub fn assistant(tokens: Vec<Token>, step: usize) -> Result<Self> {
        Self::new(Role::Assistant, tokens, step)
    }

    pub fn user(tokens: Vec<Token>, step: usize) -> Result<Self> {
        Self::new(Role::User, tokens, step)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    FlagCaptured,
    FailedSubmission,
    StepBudgetExhausted,
    Running,
}

impl Terminal {
    pub fn is_done(self) -> bool {
        self != Terminal::Running
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    turns: Vec<Turn>,
    terminal: Terminal,
}

impl Default for Trajectory {
    fn default() -> Self {
        Self::new()
    }
}

impl Trajectory {
    pub fn new() -> Self {
        Self { turns: Vec::new(), terminal: Terminal::Running }
    }

    /// Builds a trajectory, checking that consecutive turns change role.
    pub fn from_turns(turns: Vec<Turn>, terminal: Terminal) -> Result<Self> {
        let mut t = Self::new();
        for turn in turns {
            t.push(turn)?;
        }
        t.terminal = terminal;
        Ok(t)
    }

    pub fn push(&mut self, turn: Turn) -> Result<()> {
        if self.terminal.is_done() {
            return Err(Error::EpisodeFinished);
        }
        if let Some(last) = self.turns.last() {
            if last.role == turn.role {
                return Err(Error::InvalidTurn(format!(
                    "two consecutive {:?} turns at index {}",
                    turn.role,
                    self.turns.len()
                )));
            }
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn finish(&mut self, terminal: Terminal) {
        self.terminal = terminal;
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn terminal(&self) -> Terminal {
        self.terminal
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn assistant_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Assistant).count()
    }

    pub fn check_budget(&self, t_max: usize) -> Result<()> {
        let n = self.assistant_turns();
        if n > t_max {
            return Err(Error::InvalidTurn(format!("{n} assistant turns exceed budget {t_max}")));
        }
        Ok(())
    }

    pub fn token_count(&self) -> usize {
        self.turns.iter().map(|t| t.tokens.len()).sum()
    }

    pub fn flatten(&self) -> Vec<Token> {
        self.turns.iter().flat_map(|t| t.tokens.iter().copied()).collect()
    }
}

/// One bit per flattened token; set exactly at assistant-role positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

pub fn build_mask(trajectory: &Trajectory) -> Result<TokenMask> {
    if trajectory.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let bits = trajectory
        .turns
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.role == Role::Assistant, t.tokens.len()))
        .collect();
    Ok(TokenMask { bits })
}

/// Concatenated assistant tokens with back-references into the turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssistantSpan {
    pub tokens: Vec<Token>,
    /// `(turn index, offset within turn)` for each span token.
    pub origin: Vec<(usize, usize)>,
}

impl AssistantSpan {
    /// Writes span tokens back into per-turn buffers; the inverse of
    /// [`concat_assistant`]. Returns `(turn index, tokens)` pairs in order.
    pub fn scatter(&self) -> Vec<(usize, Vec<Token>)> {
        let mut out: Vec<(usize, Vec<Token>)> = Vec::new();
        for (tok, &(turn, offset)) in self.tokens.iter().zip(&self.origin) {
            match out.last_mut() {
                Some((t, buf)) if *t == turn => {
                    debug_assert_eq!(buf.len(), offset);
                    buf.push(*tok);
                }
                _ => out.push((turn, vec![*tok])),
            }
        }
        out
    }
}

pub fn concat_assistant(trajectory: &Trajectory) -> AssistantSpan {
    let mut tokens = Vec::new();
    let mut origin = Vec::new();
    for (i, turn) in trajectory.turns.iter().enumerate() {
        if turn.role == Role::Assistant {
            for (j, tok) in turn.tokens.iter().enumerate() {
                tokens.push(*tok);
                origin.push((i, j));
            }
        }
    }
    AssistantSpan { tokens, origin }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReturn {
    pub value: f64,
    pub per_step: Vec<f64>,
}

pub fn total_return(per_step: &[f64]) -> Result<EpisodeReturn> {
    if per_step.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFiniteReward);
    }
    Ok(EpisodeReturn { value: per_step.iter().sum(), per_step: per_step.to_vec() })
}

#[derive(Debug, Serialize, Deserialize)]
struct ReplayRecord {
    role: Role,
    step: usize,
    tokens: Vec<Token>,
    text: String,
}

/// Writes one JSON object per turn. Text is rendered for reading only.
pub fn write_replay<W: Write>(trajectory: &Trajectory, vocab: &Vocab, mut out: W) -> Result<()> {
    for turn in &trajectory.turns {
        let record = ReplayRecord {
            role: turn.role,
            step: turn.step,
            tokens: turn.tokens.clone(),
            text: vocab.detokenize(&turn.tokens),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads turns back from replay records; token ids are authoritative.
pub fn read_replay<R: BufRead>(input: R) -> Result<Vec<Turn>> {
    let mut turns = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReplayRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Replay { line: i + 1, message: e.to_string() })?;
        let turn = Turn::new(record.role, record.tokens, record.step)
            .map_err(|e| Error::Replay { line: i + 1, message: e.to_string() })?;
        turns.push(turn);
    }
    Ok(turns)
}
