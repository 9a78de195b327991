//! Offline completion reward and online per-step reward schedule.
//!
//! Offline: `R = R_format + R_accuracy`, where the format part awards a
//! `<think>` block and a `=== Step i ===` header, and the accuracy part
//! awards a matching step number plus exact (or partial, Jaccard-scaled)
//! command agreement with the expert completion.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Terminal;

pub const THINK_REWARD: f64 = 0.3;
pub const HEADER_REWARD: f64 = 0.3;
pub const STEP_MATCH_REWARD: f64 = 0.2;
pub const EXACT_COMMAND_REWARD: f64 = 1.0;
pub const PARTIAL_SCALE: f64 = 0.7;
/// Partial credit requires Jaccard similarity strictly above this.
pub const JACCARD_GATE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineRewardConfig {
    /// Multiplier on Jaccard similarity for partial command matches.
    pub partial_scale: f64,
}

impl Default for OfflineRewardConfig {
    fn default() -> Self {
        Self { partial_scale: PARTIAL_SCALE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OfflineRewardBreakdown {
    pub format_think: f64,
    pub format_header: f64,
    pub step_match: f64,
    pub command_score: f64,
    pub total: f64,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"=== Step (\d+) ===").unwrap())
}

fn has_think_block(text: &str) -> bool {
    let Some(open) = text.find("<think>") else { return false };
    let body = &text[open + "<think>".len()..];
    match body.find("</think>") {
        Some(close) => !body[..close].contains("<think>"),
        None => false,
    }
}

/// Step number from the first `=== Step i ===` header, if any.
pub fn parse_step(text: &str) -> Option<u64> {
    header_re().captures(text).and_then(|c| c[1].parse().ok())
}

/// First line starting with `$ `, without the prompt, whitespace-normalized.
pub fn first_command(text: &str) -> Option<String> {
    text.lines().find_map(|line| {
        let line = line.trim_start();
        let rest = line.strip_prefix("$ ").or_else(|| (line == "$").then_some(""))?;
        let cmd = normalize(rest);
        (!cmd.is_empty()).then_some(cmd)
    })
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn score_format(completion: &str) -> (f64, f64) {
    let think = if has_think_block(completion) { THINK_REWARD } else { 0.0 };
    let header = if header_re().is_match(completion) { HEADER_REWARD } else { 0.0 };
    (think, header)
}

pub fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// The expert side of a comparison: step index and command line.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Reference {
    pub step: Option<u64>,
    pub command: Option<String>,
}

impl Reference {
    pub fn new(step: u64, command: &str) -> Self {
        Self { step: Some(step), command: Some(normalize(command)) }
    }

    /// Extracts the header step and first command line from expert text.
    pub fn from_text(text: &str) -> Self {
        Self { step: parse_step(text), command: first_command(text) }
    }
}

pub fn command_score(candidate: &str, reference: &str, config: &OfflineRewardConfig) -> f64 {
    let (c, r) = (normalize(candidate), normalize(reference));
    if c == r {
        return EXACT_COMMAND_REWARD;
    }
    let a: HashSet<&str> = c.split_whitespace().collect();
    let b: HashSet<&str> = r.split_whitespace().collect();
    let j = jaccard(&a, &b);
    if j > JACCARD_GATE {
        config.partial_scale * j
    } else {
        0.0
    }
}

pub fn score_accuracy(completion: &str, reference: &Reference, config: &OfflineRewardConfig) -> (f64, f64) {
    let step_match = match (parse_step(completion), reference.step) {
        (Some(a), Some(b)) if a == b => STEP_MATCH_REWARD,
        _ => 0.0,
    };
    let command = match (first_command(completion), reference.command.as_deref()) {
        (Some(c), Some(r)) => command_score(&c, r, config),
        _ => 0.0,
    };
    (step_match, command)
}

pub fn score_offline(completion: &str, reference: &Reference, config: &OfflineRewardConfig) -> OfflineRewardBreakdown {
    let (format_think, format_header) = score_format(completion);
    let (step_match, command_score) = score_accuracy(completion, reference, config);
    OfflineRewardBreakdown {
        format_think,
        format_header,
        step_match,
        command_score,
        total: format_think + format_header + step_match + command_score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineRewardSchedule {
    pub r_flag: f64,
    pub r_step_valid: f64,
    pub r_step_exec: f64,
    pub r_fail: f64,
    pub r_bad_submit: f64,
}

impl Default for OnlineRewardSchedule {
    fn default() -> Self {
        Self { r_flag: 1.0, r_step_valid: 0.05, r_step_exec: 0.05, r_fail: -0.1, r_bad_submit: -0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    FlagCaptured,
    ValidSuccess,
    ValidFailure,
    Invalid,
    FailedSubmission,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub kind: OutcomeKind,
    pub observation: String,
}

pub fn score_step(outcome: &StepOutcome, schedule: &OnlineRewardSchedule) -> f64 {
    match outcome.kind {
        OutcomeKind::FlagCaptured => schedule.r_flag,
        OutcomeKind::ValidSuccess => schedule.r_step_valid + schedule.r_step_exec,
        OutcomeKind::ValidFailure | OutcomeKind::Invalid | OutcomeKind::FailedSubmission => schedule.r_fail,
    }
}

/// Extra reward applied once when an episode ends.
pub fn terminal_adjust(terminal: Terminal, schedule: &OnlineRewardSchedule) -> Result<f64> {
    match terminal {
        Terminal::Running => Err(Error::EpisodeRunning),
        Terminal::FailedSubmission => Ok(schedule.r_bad_submit),
        Terminal::FlagCaptured | Terminal::StepBudgetExhausted => Ok(0.0),
    }
}
