//! Brute-force solver: breadth-first search over template instantiations,
//! stepping the real environment. Used as the reachability oracle.

use std::collections::{BTreeSet, HashSet, VecDeque};

use super::env::{parse_action, reset, step, EnvState, ParsedAction};
use super::scenario::{Scenario, ScenarioError};
use crate::rewards::OutcomeKind;

/// A shortest command sequence that completes the flag stage, followed by
/// the flag submission.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    /// `(stage id, command, observation)` per command step.
    pub steps: Vec<(String, String, String)>,
    pub submit: String,
}

impl Solution {
    pub fn commands(&self) -> Vec<String> {
        self.steps.iter().map(|(_, c, _)| c.clone()).chain([self.submit.clone()]).collect()
    }
}

fn candidates(scenario: &Scenario) -> Vec<(String, String)> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for s in &scenario.stages {
        for p in &s.success_patterns {
            let cmd = scenario.instantiate(p);
            if seen.insert(cmd.clone()) {
                out.push((s.id.clone(), cmd));
            }
        }
    }
    out
}

pub fn solve(scenario: &Scenario) -> Result<Solution, ScenarioError> {
    let budget = scenario.stages.len() + 1;
    let flag_stage = scenario.flag_stage().id.clone();
    let cands = candidates(scenario);
    let (start, _) = reset(scenario, budget);
    let mut queue: VecDeque<(EnvState, Vec<(String, String, String)>)> = VecDeque::from([(start, vec![])]);
    let mut visited: HashSet<BTreeSet<String>> = HashSet::new();
    while let Some((state, path)) = queue.pop_front() {
        if state.completed.contains(&flag_stage) {
            return Ok(Solution { steps: path, submit: format!("submit {}", scenario.flag) });
        }
        if !visited.insert(state.completed.clone()) || path.len() >= scenario.stages.len() {
            continue;
        }
        for (_, cmd) in &cands {
            let action = parse_action(&format!("$ {cmd}"), &scenario.lexicon);
            if matches!(action, ParsedAction::Invalid(_)) {
                continue;
            }
            let (next, outcome) = step(scenario, &state, &action).expect("state not done");
            if outcome.kind == OutcomeKind::ValidSuccess {
                let stage = next.completed.difference(&state.completed).next().cloned().unwrap_or_default();
                let mut p = path.clone();
                p.push((stage, cmd.clone(), outcome.observation));
                queue.push_back((next, p));
            }
        }
    }
    Err(ScenarioError::Rule {
        stage: flag_stage,
        rule: "unreachable flag",
        detail: format!("no command sequence of at most {} steps reaches the flag", scenario.stages.len()),
    })
}
