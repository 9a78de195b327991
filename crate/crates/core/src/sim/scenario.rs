//! Scenario files: an attack graph of stages gated by command templates.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::split_words;

/// Upper bound on the word count of any observation text.
pub const MAX_OBSERVATION_WORDS: usize = 512;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("stage {stage}: {rule}: {detail}")]
    Rule { stage: String, rule: &'static str, detail: String },
}

fn rule(stage: &str, rule: &'static str, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::Rule { stage: stage.to_string(), rule, detail: detail.into() }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub id: String,
    #[serde(default)]
    pub requires: Vec<String>,
    pub success_patterns: Vec<String>,
    pub success_observation: String,
    pub hint_observation: String,
    #[serde(default)]
    pub reveals_flag: bool,
    /// Expert reasoning for this stage, used when rendering walkthroughs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub prompt: String,
    pub lexicon: Vec<String>,
    pub stages: Vec<Stage>,
    pub flag: String,
    /// Concrete values for template placeholders, used by the solver.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bindings: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PatternWord {
    Literal(String),
    Placeholder(String),
}

fn placeholder_name(word: &str) -> Option<&str> {
    let inner = word.strip_prefix('{')?.strip_suffix('}')?;
    let ok = !inner.is_empty()
        && inner.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && inner.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    ok.then_some(inner)
}

/// Splits a template into literal words and `{name}` placeholders.
pub fn parse_pattern(template: &str) -> Vec<PatternWord> {
    split_words(template)
        .into_iter()
        .map(|w| match placeholder_name(&w) {
            Some(name) => PatternWord::Placeholder(name.to_string()),
            None => PatternWord::Literal(w),
        })
        .collect()
}

/// Matches command words against a template; returns placeholder values.
pub fn match_pattern(pattern: &[PatternWord], words: &[String]) -> Option<HashMap<String, String>> {
    if pattern.len() != words.len() {
        return None;
    }
    let mut captured = HashMap::new();
    for (p, w) in pattern.iter().zip(words) {
        match p {
            PatternWord::Literal(l) if l == w => {}
            PatternWord::Literal(_) => return None,
            PatternWord::Placeholder(name) => match captured.get(name) {
                Some(prev) if prev != w => return None,
                Some(_) => {}
                None => {
                    captured.insert(name.clone(), w.clone());
                }
            },
        }
    }
    Some(captured)
}

/// Replaces `{name}` occurrences in `text` with captured values.
pub fn substitute(text: &str, values: &HashMap<String, String>) -> String {
    let mut out = text.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

impl Scenario {
    pub fn stage_index(&self, id: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.id == id)
    }

    pub fn flag_stage(&self) -> &Stage {
        self.stages.iter().find(|s| s.reveals_flag).expect("validated scenario has a flag stage")
    }

    /// A concrete command for a template: bound placeholders take their
    /// binding, unbound ones their own name.
    pub fn instantiate(&self, template: &str) -> String {
        parse_pattern(template)
            .into_iter()
            .map(|p| match p {
                PatternWord::Literal(w) => w,
                PatternWord::Placeholder(name) => self.bindings.get(&name).cloned().unwrap_or(name),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Every text the environment can show or accept, for vocabulary building.
    pub fn texts(&self) -> Vec<String> {
        let mut out = vec![self.prompt.clone(), self.flag.clone(), format!("submit {}", self.flag)];
        out.extend(self.lexicon.iter().cloned());
        out.extend(self.bindings.values().cloned());
        for s in &self.stages {
            out.extend(s.success_patterns.iter().map(|p| self.instantiate(p)));
            let values: HashMap<String, String> =
                self.bindings.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
            out.push(substitute(&s.success_observation, &values));
            out.push(s.hint_observation.clone());
            out.extend(s.thought.iter().cloned());
        }
        out
    }
}

/// Parses and checks a scenario file's contents.
pub fn validate_scenario(contents: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(contents).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    check_scenario(&scenario)?;
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
    validate_scenario(&text)
}

pub fn check_scenario(s: &Scenario) -> Result<(), ScenarioError> {
    if s.id.trim().is_empty() {
        return Err(ScenarioError::Parse("empty scenario id".into()));
    }
    if s.flag.trim().is_empty() || s.flag.split_whitespace().count() != 1 {
        return Err(ScenarioError::Parse("flag must be a single non-empty word".into()));
    }
    let Some(root) = s.stages.first() else {
        return Err(ScenarioError::Parse("scenario has no stages".into()));
    };
    if !root.requires.is_empty() {
        return Err(rule(&root.id, "root stage", "the first stage must have no requirements"));
    }
    let lexicon: HashSet<&str> = s.lexicon.iter().map(String::as_str).collect();
    if lexicon.contains("submit") {
        return Err(rule(&root.id, "lexicon violation", "submit is reserved"));
    }
    let mut seen = HashSet::new();
    for st in &s.stages {
        if !seen.insert(st.id.as_str()) {
            return Err(rule(&st.id, "duplicate stage id", "stage ids must be unique"));
        }
    }
    for st in &s.stages {
        for r in &st.requires {
            if !seen.contains(r.as_str()) {
                return Err(rule(&st.id, "unknown requirement", format!("no stage {r}")));
            }
        }
        if st.success_patterns.is_empty() {
            return Err(rule(&st.id, "empty patterns", "at least one success pattern is required"));
        }
        for p in &st.success_patterns {
            match parse_pattern(p).first() {
                Some(PatternWord::Literal(tool)) if lexicon.contains(tool.as_str()) => {}
                Some(PatternWord::Literal(tool)) => {
                    return Err(rule(&st.id, "lexicon violation", format!("tool {tool} is not in the lexicon")))
                }
                _ => return Err(rule(&st.id, "lexicon violation", format!("pattern {p:?} does not start with a tool"))),
            }
            if p.chars().filter(|c| *c == '"').count() % 2 == 1 || p.chars().filter(|c| *c == '\'').count() % 2 == 1 {
                return Err(rule(&st.id, "unbalanced quotes", format!("pattern {p:?}")));
            }
        }
        for text in [&st.success_observation, &st.hint_observation] {
            let n = split_words(text).len();
            if n > MAX_OBSERVATION_WORDS {
                return Err(rule(&st.id, "observation too long", format!("{n} words")));
            }
        }
    }
    let flag_stages: Vec<&Stage> = s.stages.iter().filter(|st| st.reveals_flag).collect();
    if flag_stages.len() != 1 {
        return Err(rule(&root.id, "flag stage count", format!("expected exactly one, found {}", flag_stages.len())));
    }
    if !flag_stages[0].success_observation.contains(&s.flag) {
        return Err(rule(&flag_stages[0].id, "flag not revealed", "success observation must contain the flag"));
    }
    check_acyclic(s)?;
    super::solver::solve(s)?;
    Ok(())
}

fn check_acyclic(s: &Scenario) -> Result<(), ScenarioError> {
    // 0 = unvisited, 1 = on stack, 2 = done
    fn visit(i: usize, s: &Scenario, state: &mut [u8]) -> Result<(), ScenarioError> {
        match state[i] {
            1 => return Err(rule(&s.stages[i].id, "dependency cycle", "stage depends on itself")),
            2 => return Ok(()),
            _ => {}
        }
        state[i] = 1;
        for r in &s.stages[i].requires {
            let j = s.stage_index(r).expect("checked");
            visit(j, s, state)?;
        }
        state[i] = 2;
        Ok(())
    }
    let mut state = vec![0u8; s.stages.len()];
    for i in 0..s.stages.len() {
        visit(i, s, &mut state)?;
    }
    Ok(())
}
