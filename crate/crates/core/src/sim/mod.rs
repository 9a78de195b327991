//! Simulated capture-the-flag environment.

mod env;
mod scenario;
mod solver;

pub use env::{parse_action, reset, step, Action, ActionKind, EnvState, ParsedAction, FLAG_ACCEPTED, FLAG_REJECTED, NOTHING_NEW};
pub use scenario::{
    check_scenario, load_scenario, match_pattern, parse_pattern, substitute, validate_scenario, PatternWord, Scenario,
    ScenarioError, Stage, MAX_OBSERVATION_WORDS,
};
pub use solver::{solve, Solution};
