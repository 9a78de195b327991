//! Word-level vocabulary shared by the walkthrough corpus, the simulator and
//! the policy.
//!
//! Text is split on whitespace; leading and trailing punctuation is peeled
//! into separate words while punctuation inside a word is kept, so host
//! addresses, paths and flags stay single tokens. Structural markers of the
//! walkthrough grammar map onto reserved ids.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u32);

impl Token {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const BOS: Token = Token(0);
pub const EOS: Token = Token(1);
pub const THINK_OPEN: Token = Token(2);
pub const THINK_CLOSE: Token = Token(3);
pub const STEP_HDR: Token = Token(4);
pub const CMD_MARK: Token = Token(5);
pub const OBS_MARK: Token = Token(6);
pub const SUBMIT: Token = Token(7);
pub const UNK: Token = Token(8);

/// Surface names of the reserved ids, in id order.
pub const RESERVED: [&str; 9] = [
    "<s>", "</s>", "<think>", "</think>", "<step>", "$", "<obs>", "submit", "<unk>",
];

/// Tokens only the environment writes; the policy never emits them.
pub const NON_EMITTABLE: [Token; 2] = [BOS, OBS_MARK];

pub const THINK_OPEN_TEXT: &str = "<think>";
pub const THINK_CLOSE_TEXT: &str = "</think>";
pub const OBS_MARKER_TEXT: &str = "--- observation ---";

pub fn step_header(step: usize) -> String {
    format!("=== Step {step} ===")
}

pub fn is_reserved(token: Token) -> bool {
    token.index() < RESERVED.len()
}

/// Reserved ids that end a command line.
pub fn is_structural(token: Token) -> bool {
    is_reserved(token) && token != SUBMIT && token != UNK
}

fn scanner() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"=== Step (\d+) ===|--- observation ---|\S+").unwrap())
}

const PEEL_LEADING: &[char] = &['(', '"', '\''];
const PEEL_TRAILING: &[char] = &[',', '.', ';', ':', '!', '?', ')', '"', '\''];

/// A word of text after marker recognition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Word {
    StepHeader(String),
    ObsMarker,
    Plain(String),
}

fn push_peeled(word: &str, out: &mut Vec<Word>) {
    if word.chars().all(|c| !c.is_alphanumeric()) {
        out.push(Word::Plain(word.to_string()));
        return;
    }
    let mut rest = word;
    while let Some(c) = rest.chars().next().filter(|c| PEEL_LEADING.contains(c)) {
        out.push(Word::Plain(c.to_string()));
        rest = &rest[c.len_utf8()..];
    }
    let mut trailing = Vec::new();
    while let Some(c) = rest.chars().last().filter(|c| PEEL_TRAILING.contains(c)) {
        if rest.len() == c.len_utf8() {
            break;
        }
        trailing.push(c.to_string());
        rest = &rest[..rest.len() - c.len_utf8()];
    }
    out.push(Word::Plain(rest.to_string()));
    out.extend(trailing.into_iter().rev().map(Word::Plain));
}

/// Splits text into words, recognising step headers and observation markers.
pub fn scan(text: &str) -> Vec<Word> {
    let spaced = text
        .replace(THINK_OPEN_TEXT, " <think> ")
        .replace(THINK_CLOSE_TEXT, " </think> ");
    let mut out = Vec::new();
    for caps in scanner().captures_iter(&spaced) {
        let whole = caps.get(0).unwrap().as_str();
        if let Some(n) = caps.get(1) {
            out.push(Word::StepHeader(n.as_str().to_string()));
        } else if whole == OBS_MARKER_TEXT {
            out.push(Word::ObsMarker);
        } else if whole == THINK_OPEN_TEXT || whole == THINK_CLOSE_TEXT {
            out.push(Word::Plain(whole.to_string()));
        } else {
            push_peeled(whole, &mut out);
        }
    }
    out
}

/// Plain words of a command or template, punctuation peeled.
pub fn split_words(text: &str) -> Vec<String> {
    scan(text)
        .into_iter()
        .flat_map(|w| match w {
            Word::StepHeader(n) => vec!["===".into(), "Step".into(), n, "===".into()],
            Word::ObsMarker => vec![OBS_MARKER_TEXT.to_string()],
            Word::Plain(p) => vec![p],
        })
        .collect()
}

/// Fixed vocabulary: reserved ids first, then words in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocab {
    /// Builds a vocabulary from every word in `texts`, plus the numbers
    /// `1..=max_step` used by step headers. Ordering is deterministic.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_step: usize) -> Self {
        let mut set = BTreeSet::new();
        for n in 1..=max_step {
            set.insert(n.to_string());
        }
        for text in texts {
            for word in scan(text) {
                match word {
                    Word::StepHeader(n) => {
                        set.insert(n);
                    }
                    Word::ObsMarker => {}
                    Word::Plain(p) => {
                        set.insert(p);
                    }
                }
            }
        }
        let extra = set
            .into_iter()
            .filter(|w| !RESERVED.contains(&w.as_str()) && !is_marker_alias(w));
        Self::from_words(RESERVED.iter().map(|s| s.to_string()).chain(extra).collect())
            .expect("reserved prefix is always present")
    }

    /// Rebuilds a vocabulary from its id-ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(Error::Config("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), Token(i as u32)).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, token: Token) -> Option<&str> {
        self.words.get(token.index()).map(String::as_str)
    }

    pub fn get(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    fn lookup(&self, word: &str) -> Token {
        match word {
            THINK_OPEN_TEXT => THINK_OPEN,
            THINK_CLOSE_TEXT => THINK_CLOSE,
            "$" => CMD_MARK,
            "submit" => SUBMIT,
            _ if is_marker_alias(word) => UNK,
            _ => self.index.get(word).copied().unwrap_or(UNK),
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for word in scan(text) {
            match word {
                Word::StepHeader(n) => {
                    out.push(STEP_HDR);
                    out.push(self.lookup(&n));
                }
                Word::ObsMarker => out.push(OBS_MARK),
                Word::Plain(p) => out.push(self.lookup(&p)),
            }
        }
        out
    }

    /// Renders tokens back into walkthrough-grammar text. Structural markers
    /// start their own lines so that command lines can be recovered.
    pub fn detokenize(&self, tokens: &[Token]) -> String {
        let mut out = String::new();
        let mut i = 0;
        let push_word = |out: &mut String, w: &str| {
            if !(out.is_empty() || out.ends_with('\n') || out.ends_with(' ')) {
                out.push(' ');
            }
            out.push_str(w);
        };
        let newline = |out: &mut String| {
            while out.ends_with(' ') {
                out.pop();
            }
            if !(out.is_empty() || out.ends_with('\n')) {
                out.push('\n');
            }
        };
        while i < tokens.len() {
            let t = tokens[i];
            match t {
                BOS => {}
                EOS => break,
                STEP_HDR => {
                    let n = tokens
                        .get(i + 1)
                        .filter(|n| !is_reserved(**n))
                        .and_then(|n| self.word(*n));
                    newline(&mut out);
                    match n {
                        Some(n) => {
                            out.push_str(&step_header_text(n));
                            i += 1;
                        }
                        None => out.push_str("=== Step ==="),
                    }
                    out.push('\n');
                }
                THINK_OPEN => {
                    newline(&mut out);
                    out.push_str(THINK_OPEN_TEXT);
                }
                THINK_CLOSE => {
                    push_word(&mut out, THINK_CLOSE_TEXT);
                    out.push('\n');
                }
                CMD_MARK => {
                    newline(&mut out);
                    out.push('$');
                }
                OBS_MARK => {
                    newline(&mut out);
                    out.push_str(OBS_MARKER_TEXT);
                    out.push('\n');
                }
                _ => push_word(&mut out, self.word(t).unwrap_or("<unk>")),
            }
            i += 1;
        }
        while out.ends_with(char::is_whitespace) {
            out.pop();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }
}

fn step_header_text(n: &str) -> String {
    format!("=== Step {n} ===")
}

// Surface strings that only appear as parts of markers, never as words.
fn is_marker_alias(word: &str) -> bool {
    matches!(word, "<s>" | "</s>" | "<step>" | "<obs>" | "<unk>")
}
