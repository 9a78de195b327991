//! Deterministic reset/step environment over a validated [`Scenario`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::scenario::{match_pattern, parse_pattern, substitute, Scenario};
use crate::error::{Error, Result};
use crate::rewards::{first_command, OutcomeKind, StepOutcome};
use crate::trajectory::Terminal;
use crate::vocab::split_words;

pub const FLAG_ACCEPTED: &str = "flag accepted";
pub const FLAG_REJECTED: &str = "flag rejected";
pub const NOTHING_NEW: &str = "no new findings";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub scenario_id: String,
    pub completed: BTreeSet<String>,
    pub steps_taken: usize,
    pub t_max: usize,
    pub done: bool,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Command,
    Submit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub kind: ActionKind,
    /// Whitespace-normalized command line, or the submitted flag.
    pub text: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    Valid(Action),
    Invalid(String),
}

/// Extracts the command from a completion: the first `$ ` line if there is
/// one, otherwise the first non-empty line.
pub fn parse_action(raw: &str, lexicon: &[String]) -> ParsedAction {
    let line = first_command(raw).or_else(|| {
        if raw.lines().any(|l| l.trim_start().starts_with('$')) {
            return None;
        }
        raw.lines().map(str::trim).find(|l| !l.is_empty()).map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
    });
    let Some(line) = line else {
        return ParsedAction::Invalid("no command".into());
    };
    if line.chars().filter(|c| *c == '"').count() % 2 == 1 || line.chars().filter(|c| *c == '\'').count() % 2 == 1 {
        return ParsedAction::Invalid("unbalanced quotes".into());
    }
    let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
    let tool = words[0].as_str();
    if tool == "submit" {
        if words.len() != 2 {
            return ParsedAction::Invalid("submit takes exactly one flag".into());
        }
        return ParsedAction::Valid(Action { kind: ActionKind::Submit, text: words[1].clone(), words });
    }
    if !lexicon.iter().any(|t| t == tool) {
        return ParsedAction::Invalid(format!("command not found: {tool}"));
    }
    ParsedAction::Valid(Action { kind: ActionKind::Command, text: line, words })
}

pub fn reset(scenario: &Scenario, t_max: usize) -> (EnvState, String) {
    let state = EnvState {
        scenario_id: scenario.id.clone(),
        completed: BTreeSet::new(),
        steps_taken: 0,
        t_max,
        done: false,
        terminal: Terminal::Running,
    };
    (state, scenario.prompt.clone())
}

fn requirements_met(scenario: &Scenario, completed: &BTreeSet<String>, stage: usize) -> bool {
    scenario.stages[stage].requires.iter().all(|r| completed.contains(r))
}

/// Hint of the first incomplete stage whose requirements are met.
fn frontier_hint(scenario: &Scenario, completed: &BTreeSet<String>) -> String {
    scenario
        .stages
        .iter()
        .enumerate()
        .find(|(i, s)| !completed.contains(&s.id) && requirements_met(scenario, completed, *i))
        .map(|(_, s)| s.hint_observation.clone())
        .unwrap_or_else(|| NOTHING_NEW.to_string())
}

pub fn step(scenario: &Scenario, state: &EnvState, action: &ParsedAction) -> Result<(EnvState, StepOutcome)> {
    if state.done {
        return Err(Error::EpisodeFinished);
    }
    let mut next = state.clone();
    next.steps_taken += 1;
    let outcome = match action {
        ParsedAction::Invalid(reason) => StepOutcome { kind: OutcomeKind::Invalid, observation: format!("error: {reason}") },
        ParsedAction::Valid(a) if a.kind == ActionKind::Submit => {
            next.done = true;
            let flag_stage = &scenario.flag_stage().id;
            if a.text == scenario.flag && next.completed.contains(flag_stage) {
                next.terminal = Terminal::FlagCaptured;
                StepOutcome { kind: OutcomeKind::FlagCaptured, observation: FLAG_ACCEPTED.into() }
            } else {
                next.terminal = Terminal::FailedSubmission;
                StepOutcome { kind: OutcomeKind::FailedSubmission, observation: FLAG_REJECTED.into() }
            }
        }
        ParsedAction::Valid(a) => {
            let words = split_words(&a.text);
            let hit = scenario.stages.iter().enumerate().find_map(|(i, s)| {
                if next.completed.contains(&s.id) || !requirements_met(scenario, &next.completed, i) {
                    return None;
                }
                s.success_patterns.iter().find_map(|p| match_pattern(&parse_pattern(p), &words)).map(|m| (i, m))
            });
            match hit {
                Some((i, captured)) => {
                    let mut values: std::collections::HashMap<String, String> =
                        scenario.bindings.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                    values.extend(captured);
                    let stage = &scenario.stages[i];
                    next.completed.insert(stage.id.clone());
                    StepOutcome {
                        kind: OutcomeKind::ValidSuccess,
                        observation: substitute(&stage.success_observation, &values),
                    }
                }
                None => StepOutcome { kind: OutcomeKind::ValidFailure, observation: frontier_hint(scenario, &next.completed) },
            }
        }
    };
    if !next.done && next.steps_taken >= next.t_max {
        next.done = true;
        next.terminal = Terminal::StepBudgetExhausted;
    }
    Ok((next, outcome))
}
