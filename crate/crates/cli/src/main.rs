//! `ctf-grpo`: corpus building, both training stages, evaluation rollouts,
//! reward scoring and scenario checks.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on runtime failure.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctf_grpo::train::Stage;

use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "ctf-grpo", version, about = "Group-relative policy optimization on walkthroughs and a simulated CTF environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse walkthroughs (and optionally generate them from scenarios) into
    /// training tuples and a vocabulary.
    DataBuild {
        /// Directory of walkthrough files (*.txt).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Scenario whose texts join the vocabulary; repeatable.
        #[arg(long = "scenario")]
        scenarios: Vec<PathBuf>,
        /// Walkthroughs generated per scenario from its solver path.
        #[arg(long, default_value_t = 0)]
        variants: usize,
        /// Tuples output (JSON lines).
        #[arg(long)]
        output: PathBuf,
        /// Vocabulary output, one word per line.
        #[arg(long)]
        vocab: PathBuf,
        /// Corpus manifest output (JSON).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Context budget in words; older steps are dropped whole beyond it.
        #[arg(long, default_value_t = 256)]
        context_limit: usize,
        /// Step budget whose headers the vocabulary must spell.
        #[arg(long, default_value_t = 8)]
        t_max: usize,
    },
    /// Check walkthrough files and report empty thoughts.
    DataValidate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Offline stage on walkthrough tuples.
    TrainOffline(TrainArgs),
    /// Online stage in the simulator.
    TrainOnline(TrainArgs),
    /// Roll out a checkpoint (or the scripted solver) without learning.
    Eval {
        #[arg(long)]
        scenario: PathBuf,
        /// Checkpoint directory holding its vocabulary.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Follow the scenario solver instead of a policy.
        #[arg(long)]
        scripted: bool,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Argmax decoding instead of sampling.
        #[arg(long)]
        greedy: bool,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 8)]
        t_max: usize,
        #[arg(long, default_value_t = 64)]
        response_cap: usize,
        /// Directory for one replay file per episode.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a candidate completion against an expert completion.
    RewardScore {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Validate scenarios and replay their solver paths.
    ScenarioCheck {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    /// TOML config; relative paths inside resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint directory to start from.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output directory for metrics.csv, checkpoints and final/.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override such as `grpo.clip_epsilon=0.1`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl TrainArgs {
    fn into_train(self, stage: Stage) -> commands::Train {
        commands::Train {
            stage,
            config: self.config,
            init: self.init,
            out: self.out,
            seed: self.seed,
            overrides: self.overrides,
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::DataBuild { input, scenarios, variants, output, vocab, manifest, context_limit, t_max } => {
            commands::data_build(&commands::DataBuild {
                input,
                scenarios,
                variants,
                output,
                vocab,
                manifest,
                context_limit,
                t_max,
            })
        }
        Command::DataValidate { input } => commands::data_validate(&input),
        Command::TrainOffline(args) => commands::train(&args.into_train(Stage::Offline)),
        Command::TrainOnline(args) => commands::train(&args.into_train(Stage::Online)),
        Command::Eval { scenario, checkpoint, scripted, episodes, seed, greedy, temperature, t_max, response_cap, out } => {
            commands::eval(&commands::Eval {
                scenario,
                checkpoint,
                scripted,
                episodes,
                seed,
                greedy,
                temperature,
                t_max,
                response_cap,
                out,
            })
        }
        Command::RewardScore { candidate, reference } => commands::reward_score(&candidate, &reference),
        Command::ScenarioCheck { scenarios } => commands::scenario_check(&scenarios),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
