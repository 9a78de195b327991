//! Walkthrough documents in the Thought-Command-Observation grammar and the
//! context/target tuples built from them.
//!
//! ```text
//! <task prompt>
//! === Step 1 ===
//! <think>reasoning</think>
//! $ command
//! --- observation ---
//! output
//! === Step 2 ===
//! ...
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::first_command;
use crate::sim::{solve, Scenario, FLAG_ACCEPTED};
use crate::vocab::{scan, step_header, Word, OBS_MARKER_TEXT, THINK_CLOSE_TEXT, THINK_OPEN_TEXT};

#[derive(Debug, Error)]
pub enum WalkthroughError {
    #[error("missing prompt")]
    MissingPrompt,
    #[error("no steps")]
    NoSteps,
    #[error("non-consecutive step {found}")]
    NonConsecutive { found: usize },
    #[error("step {0}: missing think block")]
    MissingThink(usize),
    #[error("step {0}: empty thought")]
    EmptyThought(usize),
    #[error("step {0}: missing command")]
    MissingCommand(usize),
    #[error("prompt needs {len} tokens, limit is {limit}")]
    PromptTooLong { len: usize, limit: usize },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("{doc}: {source}")]
    InDoc {
        doc: String,
        #[source]
        source: Box<WalkthroughError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl WalkthroughError {
    /// Attaches the id of the document the error came from.
    pub fn in_doc(self, doc: &str) -> Self {
        WalkthroughError::InDoc { doc: doc.to_string(), source: Box::new(self) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub thought: String,
    pub command: String,
    pub observation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkthroughDoc {
    pub doc_id: String,
    pub prompt: String,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTuple {
    pub doc_id: String,
    pub step: usize,
    pub context: String,
    pub target: String,
}

fn header_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*=== Step (\d+) ===[ \t]*$").unwrap())
}

fn collapse(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn parse_step(index: usize, body: &str) -> Result<StepRecord, WalkthroughError> {
    let (head, observation) = match body.find(OBS_MARKER_TEXT) {
        Some(at) => (&body[..at], body[at + OBS_MARKER_TEXT.len()..].trim()),
        None => (body, ""),
    };
    let open = head.find(THINK_OPEN_TEXT).ok_or(WalkthroughError::MissingThink(index))?;
    let rest = &head[open + THINK_OPEN_TEXT.len()..];
    let close = rest.find(THINK_CLOSE_TEXT).ok_or(WalkthroughError::MissingThink(index))?;
    let thought = collapse(&rest[..close]);
    let after = &rest[close + THINK_CLOSE_TEXT.len()..];
    let command = first_command(after).ok_or(WalkthroughError::MissingCommand(index))?;
    Ok(StepRecord { step_index: index, thought, command, observation: observation.to_string() })
}

/// Parses a document; `doc_id` is left empty.
pub fn parse_walkthrough(text: &str) -> Result<WalkthroughDoc, WalkthroughError> {
    let headers: Vec<_> = header_re().captures_iter(text).collect();
    let first = headers.first().ok_or(WalkthroughError::NoSteps)?;
    let prompt = text[..first.get(0).unwrap().start()].trim().to_string();
    if prompt.is_empty() {
        return Err(WalkthroughError::MissingPrompt);
    }
    let mut steps = Vec::with_capacity(headers.len());
    for (i, caps) in headers.iter().enumerate() {
        let found: usize = caps[1].parse().map_err(|_| WalkthroughError::NonConsecutive { found: 0 })?;
        if found != i + 1 {
            return Err(WalkthroughError::NonConsecutive { found });
        }
        let start = caps.get(0).unwrap().end();
        let end = headers.get(i + 1).map_or(text.len(), |c| c.get(0).unwrap().start());
        steps.push(parse_step(found, &text[start..end])?);
    }
    Ok(WalkthroughDoc { doc_id: String::new(), prompt, steps })
}

/// Reads a walkthrough file; the doc id is the file stem.
pub fn load_walkthrough(path: &Path) -> Result<WalkthroughDoc, WalkthroughError> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let text = std::fs::read_to_string(path).map_err(|e| WalkthroughError::from(e).in_doc(&id))?;
    let mut doc = parse_walkthrough(&text).map_err(|e| e.in_doc(&id))?;
    doc.doc_id = id;
    Ok(doc)
}

/// Steps whose thought is empty, for `data validate`.
pub fn empty_thoughts(doc: &WalkthroughDoc) -> Vec<usize> {
    doc.steps.iter().filter(|s| s.thought.is_empty()).map(|s| s.step_index).collect()
}

pub fn render_target(step: &StepRecord) -> String {
    format!("{THINK_OPEN_TEXT}{}{THINK_CLOSE_TEXT}\n$ {}", step.thought, step.command)
}

pub fn render_triple(step: &StepRecord) -> String {
    format!(
        "{}\n{}\n{OBS_MARKER_TEXT}\n{}\n",
        step_header(step.step_index),
        render_target(step),
        step.observation
    )
}

pub fn render(doc: &WalkthroughDoc) -> String {
    let mut out = format!("{}\n", doc.prompt);
    for s in &doc.steps {
        out.push_str(&render_triple(s));
    }
    out
}

/// Token count of `text` under the word-level tokenizer.
pub fn token_len(text: &str) -> usize {
    scan(text).iter().map(|w| if matches!(w, Word::StepHeader(_)) { 2 } else { 1 }).sum()
}

/// One tuple per step. Tuple `i` sees the prompt, triples `1..i` and the
/// header of step `i`; when that exceeds `context_token_limit`, whole
/// triples are dropped oldest first.
pub fn emit_tuples(doc: &WalkthroughDoc, context_token_limit: usize) -> Result<Vec<TrainTuple>, WalkthroughError> {
    let prompt = format!("{}\n", doc.prompt);
    let prompt_len = token_len(&prompt);
    let triples: Vec<String> = doc.steps.iter().map(render_triple).collect();
    let triple_lens: Vec<usize> = triples.iter().map(|t| token_len(t)).collect();
    let mut out = Vec::with_capacity(doc.steps.len());
    for (i, step) in doc.steps.iter().enumerate() {
        let header = step_header(step.step_index);
        let fixed = prompt_len + token_len(&header);
        if fixed > context_token_limit {
            return Err(WalkthroughError::PromptTooLong { len: fixed, limit: context_token_limit }.in_doc(&doc.doc_id));
        }
        let mut first = 0;
        while fixed + triple_lens[first..i].iter().sum::<usize>() > context_token_limit {
            first += 1;
        }
        let mut context = prompt.clone();
        for t in &triples[first..i] {
            context.push_str(t);
        }
        context.push_str(&header);
        out.push(TrainTuple {
            doc_id: doc.doc_id.clone(),
            step: step.step_index,
            context,
            target: render_target(step),
        });
    }
    Ok(out)
}

pub fn write_tuples<W: Write>(tuples: &[TrainTuple], mut out: W) -> Result<(), WalkthroughError> {
    for t in tuples {
        let line = serde_json::to_string(t).expect("tuples serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_tuples<R: BufRead>(input: R) -> Result<Vec<TrainTuple>, WalkthroughError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| WalkthroughError::Line { line: i + 1, message: e.to_string() })?;
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    /// Step count per document, ordered by doc id.
    pub docs: BTreeMap<String, usize>,
    pub tuples: usize,
}

impl CorpusManifest {
    pub fn new(docs: &[WalkthroughDoc]) -> Self {
        let docs: BTreeMap<String, usize> = docs.iter().map(|d| (d.doc_id.clone(), d.steps.len())).collect();
        let tuples = docs.values().sum();
        Self { docs, tuples }
    }
}

/// Words a generated variant may put in front of each thought.
const THOUGHT_PREFIXES: [&str; 6] = ["", "now", "next", "then", "so", "ok"];
pub const SUBMIT_THOUGHT: &str = "submit the flag";

/// Renders the solver's path through `scenario` as a walkthrough, ending
/// with the flag submission. Variant 0 uses the stage thoughts verbatim;
/// variant `k > 0` prefixes each thought with a word drawn from a generator
/// seeded with `k`.
pub fn generate_walkthrough(scenario: &Scenario, variant: usize) -> Result<WalkthroughDoc, crate::sim::ScenarioError> {
    let solution = solve(scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(variant as u64);
    let mut thought = |base: &str| {
        let prefix = if variant == 0 { "" } else { THOUGHT_PREFIXES[rng.random_range(0..THOUGHT_PREFIXES.len())] };
        if prefix.is_empty() {
            base.to_string()
        } else {
            format!("{prefix} {base}")
        }
    };
    let mut steps = Vec::with_capacity(solution.steps.len() + 1);
    for (i, (stage_id, command, observation)) in solution.steps.iter().enumerate() {
        let stage = &scenario.stages[scenario.stage_index(stage_id).expect("solver stage")];
        let tool = command.split_whitespace().next().unwrap_or_default();
        let base = stage.thought.clone().unwrap_or_else(|| format!("try {tool}"));
        steps.push(StepRecord {
            step_index: i + 1,
            thought: thought(&base),
            command: command.clone(),
            observation: observation.clone(),
        });
    }
    steps.push(StepRecord {
        step_index: steps.len() + 1,
        thought: thought(SUBMIT_THOUGHT),
        command: solution.submit.clone(),
        observation: FLAG_ACCEPTED.to_string(),
    });
    Ok(WalkthroughDoc { doc_id: format!("{}-{variant:03}", scenario.id), prompt: scenario.prompt.clone(), steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TWO_STEPS: &str = "find the flag on 10.0.0.5
=== Step 1 ===
<think>scan the host</think>
$ nmap 10.0.0.5
--- observation ---
port 80 open
=== Step 2 ===
<think>enumerate web paths</think>
$ gobuster 10.0.0.5
--- observation ---
found /admin
";

    #[test]
    fn parses_two_steps() {
        let doc = parse_walkthrough(TWO_STEPS).unwrap();
        assert_eq!(doc.prompt, "find the flag on 10.0.0.5");
        assert_eq!(doc.steps.len(), 2);
        assert_eq!(doc.steps[1].command, "gobuster 10.0.0.5");
        assert_eq!(doc.steps[0].observation, "port 80 open");
        assert_eq!(doc.steps[0].thought, "scan the host");
        assert_eq!(render(&doc), TWO_STEPS);
    }

    #[test]
    fn parse_errors_name_the_step() {
        let skipped = TWO_STEPS.replace("Step 2", "Step 3");
        assert_eq!(parse_walkthrough(&skipped).unwrap_err().to_string(), "non-consecutive step 3");
        let no_cmd = TWO_STEPS.replace("$ gobuster", "gobuster");
        assert_eq!(parse_walkthrough(&no_cmd).unwrap_err().to_string(), "step 2: missing command");
        let no_think = TWO_STEPS.replace("<think>scan the host</think>", "scan the host");
        assert_eq!(parse_walkthrough(&no_think).unwrap_err().to_string(), "step 1: missing think block");
        assert!(matches!(parse_walkthrough("just text"), Err(WalkthroughError::NoSteps)));
        assert!(matches!(parse_walkthrough("=== Step 1 ===\n<think>x</think>\n$ ls"), Err(WalkthroughError::MissingPrompt)));
    }

    #[test]
    fn tuples_follow_the_expansion_rule() {
        let doc = parse_walkthrough(TWO_STEPS).unwrap();
        let tuples = emit_tuples(&doc, 1000).unwrap();
        assert_eq!(tuples.len(), 2);
        assert_eq!(tuples[0].context, "find the flag on 10.0.0.5\n=== Step 1 ===");
        assert_eq!(tuples[0].target, "<think>scan the host</think>\n$ nmap 10.0.0.5");
        for part in ["scan the host", "$ nmap 10.0.0.5", "port 80 open"] {
            assert!(tuples[1].context.contains(part));
        }
        assert!(tuples[1].context.ends_with("=== Step 2 ==="));
    }

    #[test]
    fn truncation_drops_whole_triples_and_keeps_the_prompt() {
        let doc = parse_walkthrough(TWO_STEPS).unwrap();
        let full = emit_tuples(&doc, 1000).unwrap();
        let limit = token_len(&full[1].context) - 1;
        let cut = emit_tuples(&doc, limit).unwrap();
        assert_eq!(cut[1].context, "find the flag on 10.0.0.5\n=== Step 2 ===");
        let too_small = emit_tuples(&doc, 3).unwrap_err().to_string();
        assert!(too_small.contains("prompt needs"), "{too_small}");
    }

    #[test]
    fn tuple_lines_report_corruption() {
        let doc = parse_walkthrough(TWO_STEPS).unwrap();
        let tuples: Vec<TrainTuple> = (0..4).flat_map(|_| emit_tuples(&doc, 1000).unwrap()).collect();
        let mut buf = Vec::new();
        write_tuples(&tuples, &mut buf).unwrap();
        assert_eq!(read_tuples(&buf[..]).unwrap(), tuples);
        let mut lines: Vec<String> = String::from_utf8(buf).unwrap().lines().map(String::from).collect();
        lines[6] = "{\"doc_id\": 3".into();
        let err = read_tuples(lines.join("\n").as_bytes()).unwrap_err().to_string();
        assert!(err.starts_with("line 7:"), "{err}");
        let mut empty = Vec::new();
        write_tuples(&[], &mut empty).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn generated_docs_follow_the_solver() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/scenarios/web_admin.json");
        let scenario = crate::sim::load_scenario(&path).unwrap();
        let doc = generate_walkthrough(&scenario, 1).unwrap();
        assert_eq!(doc.doc_id, "web-admin-001");
        let commands: Vec<&str> = doc.steps.iter().map(|s| s.command.as_str()).collect();
        assert_eq!(commands, ["nmap 10.0.0.5", "gobuster 10.0.0.5", "curl /admin", "submit FLAG{w3b}"]);
        assert!(doc.steps[0].thought.ends_with("scan the host"));
        assert_eq!(doc.steps[3].observation, FLAG_ACCEPTED);
        let reparsed = parse_walkthrough(&render(&doc)).unwrap();
        assert_eq!(reparsed.steps, doc.steps);
        assert!(empty_thoughts(&doc).is_empty());
        let other = generate_walkthrough(&scenario, 0).unwrap();
        assert_eq!(other.steps[0].thought, "scan the host");
        assert_eq!(generate_walkthrough(&scenario, 1).unwrap(), doc);
        let distinct: std::collections::HashSet<String> =
            (1..65).map(|k| render(&generate_walkthrough(&scenario, k).unwrap())).collect();
        assert!(distinct.len() > 50, "{} distinct variants", distinct.len());
        let manifest = CorpusManifest::new(&[doc, other]);
        assert_eq!(manifest.tuples, 8);
    }

    fn arb_doc() -> impl Strategy<Value = WalkthroughDoc> {
        let word = "[a-z0-9/.-]{1,6}";
        let text = prop::collection::vec(word, 1..5).prop_map(|w| w.join(" "));
        let step = (text.clone(), text.clone(), text.clone());
        (text, prop::collection::vec(step, 1..6), "[a-z]{1,5}").prop_map(|(prompt, steps, id)| WalkthroughDoc {
            doc_id: id,
            prompt,
            steps: steps
                .into_iter()
                .enumerate()
                .map(|(i, (thought, command, observation))| StepRecord { step_index: i + 1, thought, command, observation })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn tuples_reconstruct_the_document(doc in arb_doc()) {
            let parsed = WalkthroughDoc { doc_id: doc.doc_id.clone(), ..parse_walkthrough(&render(&doc)).unwrap() };
            prop_assert_eq!(&parsed, &doc);
            let tuples = emit_tuples(&parsed, 10_000).unwrap();
            prop_assert_eq!(tuples.len(), doc.steps.len());
            let last = tuples.last().unwrap();
            let step = doc.steps.last().unwrap();
            let rebuilt = format!("{}\n{}\n{}\n{}", last.context, last.target, OBS_MARKER_TEXT, step.observation);
            prop_assert_eq!(collapse(&rebuilt), collapse(&render(&doc)));
            for (i, t) in tuples.iter().enumerate() {
                prop_assert_eq!(t.context.matches(OBS_MARKER_TEXT).count(), i);
                prop_assert_eq!(t.target.matches(THINK_OPEN_TEXT).count(), 1);
            }
        }

        #[test]
        fn truncation_never_splits_triples(doc in arb_doc(), limit in 10usize..80) {
            let prompt_len = token_len(&doc.prompt) + 2;
            match emit_tuples(&doc, limit) {
                Ok(tuples) => for t in &tuples {
                    let prefix = format!("{}\n", doc.prompt);
                    prop_assert!(t.context.starts_with(&prefix));
                    prop_assert!(token_len(&t.context) <= limit);
                    let headers = header_re().find_iter(&t.context).count();
                    prop_assert_eq!(headers, t.context.matches(OBS_MARKER_TEXT).count() + 1);
                },
                Err(_) => prop_assert!(prompt_len > limit),
            }
        }

        #[test]
        fn tuple_files_round_trip(docs in prop::collection::vec(arb_doc(), 0..4)) {
            let tuples: Vec<TrainTuple> = docs.iter().flat_map(|d| emit_tuples(d, 10_000).unwrap()).collect();
            let mut buf = Vec::new();
            write_tuples(&tuples, &mut buf).unwrap();
            prop_assert_eq!(read_tuples(&buf[..]).unwrap(), tuples);
        }
    }
}
