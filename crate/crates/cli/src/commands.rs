//! Subcommand implementations. Summaries go to standard output; machine
//! outputs only to files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ctf_grpo::policy::{load_checkpoint, PolicyConfig, PolicyParameters};
use ctf_grpo::rewards::{score_offline, OfflineRewardConfig, Reference};
use ctf_grpo::sim::{load_scenario, solve, Scenario};
use ctf_grpo::train::{
    build_vocab, evaluate, max_step, run_episode, train_offline, train_online, CheckpointWriter, CsvSink, Decode,
    EpisodeConfig, PolicyActor, ScriptedActor, Stage, TrainConfig, CHECKPOINT_VOCAB,
};
use ctf_grpo::trajectory::write_replay;
use ctf_grpo::vocab::Vocab;
use ctf_grpo::walkthrough::{
    emit_tuples, empty_thoughts, generate_walkthrough, load_walkthrough, read_tuples, write_tuples, CorpusManifest,
    TrainTuple, WalkthroughDoc,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{output_error, read_input, CliError, CliResult};

/// Walkthrough files (`*.txt`) in `dir`, sorted by name.
fn walkthrough_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::invalid(format!("{}: {e}", dir.display())))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_scenarios(paths: &[PathBuf]) -> CliResult<Vec<Scenario>> {
    paths
        .iter()
        .map(|p| load_scenario(p).map_err(|e| CliError::invalid(format!("{}: {e}", p.display()))))
        .collect()
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))
}

fn create_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => create_dir(dir),
        _ => Ok(()),
    }
}

pub struct DataBuild {
    pub input: Option<PathBuf>,
    pub scenarios: Vec<PathBuf>,
    pub variants: usize,
    pub output: PathBuf,
    pub vocab: PathBuf,
    pub manifest: Option<PathBuf>,
    pub context_limit: usize,
    pub t_max: usize,
}

pub fn data_build(args: &DataBuild) -> CliResult<()> {
    let mut docs: Vec<WalkthroughDoc> = Vec::new();
    if let Some(dir) = &args.input {
        for path in walkthrough_files(dir)? {
            docs.push(load_walkthrough(&path)?);
        }
    }
    let scenarios = load_scenarios(&args.scenarios)?;
    for s in &scenarios {
        for k in 0..args.variants {
            docs.push(generate_walkthrough(s, k)?);
        }
    }
    if docs.is_empty() {
        return Err(CliError::invalid("no walkthrough documents: give --input with *.txt files or --scenario with --variants"));
    }
    docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    if let Some(w) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
        return Err(CliError::invalid(format!("duplicate document id {}", w[0].doc_id)));
    }
    let mut tuples: Vec<TrainTuple> = Vec::new();
    for d in &docs {
        tuples.extend(emit_tuples(d, args.context_limit).map_err(|e| e.in_doc(&d.doc_id))?);
    }
    let vocab = build_vocab(&tuples, &scenarios, max_step(&tuples, args.t_max));

    for path in [Some(&args.output), Some(&args.vocab), args.manifest.as_ref()].into_iter().flatten() {
        create_parent(path)?;
    }
    let file = File::create(&args.output).map_err(|e| output_error(&args.output, e))?;
    let mut out = BufWriter::new(file);
    write_tuples(&tuples, &mut out).map_err(|e| output_error(&args.output, e))?;
    out.flush().map_err(|e| output_error(&args.output, e))?;
    vocab.save(&args.vocab).map_err(|e| output_error(&args.vocab, e))?;
    if let Some(path) = &args.manifest {
        let manifest = CorpusManifest::new(&docs);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| output_error(path, e))?;
    }
    println!("docs {} tuples {} vocab {}", docs.len(), tuples.len(), vocab.len());
    Ok(())
}

/// Checks every document and reports all problems before failing.
pub fn data_validate(input: &Path) -> CliResult<()> {
    let files = walkthrough_files(input)?;
    if files.is_empty() {
        return Err(CliError::invalid(format!("{}: no walkthrough files", input.display())));
    }
    let mut problems = 0;
    for path in &files {
        match load_walkthrough(path) {
            Ok(doc) => {
                let empty = empty_thoughts(&doc);
                if empty.is_empty() {
                    println!("{}: ok, {} steps", doc.doc_id, doc.steps.len());
                }
                for step in empty {
                    println!("{}: step {step}: empty thought", doc.doc_id);
                    problems += 1;
                }
            }
            Err(e) => {
                println!("{e}");
                problems += 1;
            }
        }
    }
    if problems > 0 {
        return Err(CliError::invalid(format!("{problems} problem(s) in {} document(s)", files.len())));
    }
    Ok(())
}

pub struct Train {
    pub stage: Stage,
    pub config: PathBuf,
    pub init: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

fn load_tuples(path: &Path) -> CliResult<Vec<TrainTuple>> {
    let file = File::open(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    read_tuples(BufReader::new(file)).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    Vocab::load(path).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Starting parameters and vocabulary: a checkpoint when `init` is given,
/// otherwise fresh adapters over the configured base.
fn initial_policy(
    config: &TrainConfig,
    init: Option<&Path>,
    tuples: &[TrainTuple],
    scenarios: &[Scenario],
) -> CliResult<(PolicyParameters, Vocab)> {
    let configured = config.vocab.as_deref().map(load_vocab).transpose()?;
    let Some(dir) = init else {
        let vocab = configured.unwrap_or_else(|| build_vocab(tuples, scenarios, max_step(tuples, config.t_max)));
        let params = PolicyParameters::init(config.policy.policy_config(vocab.len()), config.policy.base_seed)?;
        return Ok((params, vocab));
    };
    let params = load_checkpoint(dir)?;
    let vocab = load_vocab(&dir.join(CHECKPOINT_VOCAB))?;
    if configured.is_some_and(|v| v != vocab) {
        return Err(CliError::invalid(format!(
            "vocabulary in the config differs from the one stored in {}",
            dir.display()
        )));
    }
    if params.config.vocab_size != vocab.len() {
        return Err(CliError::invalid(format!(
            "{}: checkpoint has vocab_size {} but its vocabulary has {} entries",
            dir.display(),
            params.config.vocab_size,
            vocab.len()
        )));
    }
    Ok((params, vocab))
}

pub fn train(args: &Train) -> CliResult<()> {
    let mut config = TrainConfig::load(&args.config)?;
    if config.stage != args.stage {
        return Err(CliError::invalid(format!(
            "{}: config stage is {} but train-{} was requested",
            args.config.display(),
            config.stage,
            args.stage
        )));
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    for o in &args.overrides {
        config.set(o)?;
    }
    config.validate()?;

    let (tuples, scenarios) = match args.stage {
        Stage::Offline => {
            let path = config.tuples.as_deref().ok_or_else(|| CliError::invalid("offline config needs `tuples`"))?;
            (load_tuples(path)?, load_scenarios(&config.scenarios)?)
        }
        Stage::Online => {
            if config.scenarios.is_empty() {
                return Err(CliError::invalid("online config needs at least one entry in `scenarios`"));
            }
            (Vec::new(), load_scenarios(&config.scenarios)?)
        }
    };
    let (mut params, vocab) = initial_policy(&config, args.init.as_deref(), &tuples, &scenarios)?;
    let base_hash = params.base_hash();

    create_dir(&args.out)?;
    let resolved = toml::to_string(&config).expect("config serializes");
    let config_out = args.out.join("config.toml");
    fs::write(&config_out, resolved).map_err(|e| output_error(&config_out, e))?;
    let metrics = args.out.join("metrics.csv");
    let mut sink = CsvSink::create(&metrics).map_err(|e| output_error(&metrics, e))?;
    let writer = CheckpointWriter { dir: args.out.clone(), every: config.checkpoint_every, vocab };
    let summary = match args.stage {
        Stage::Offline => train_offline(&tuples, &mut params, &writer.vocab, &config, &mut sink, Some(&writer))?,
        Stage::Online => train_online(&scenarios, &mut params, &writer.vocab, &config, &mut sink, Some(&writer))?,
    };
    if params.base_hash() != base_hash {
        return Err(CliError::Runtime("frozen base weights changed during training".into()));
    }
    writer.write(&args.out.join("final"), &params)?;

    let mut line = format!("{}: {} updates, final loss {:.6}", args.stage, summary.updates, summary.final_loss);
    if let Some(rate) = summary.success_rate {
        line.push_str(&format!(", success rate {rate:.3}"));
    }
    println!("{line}");
    Ok(())
}

pub struct Eval {
    pub scenario: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub scripted: bool,
    pub episodes: usize,
    pub seed: u64,
    pub greedy: bool,
    pub temperature: f64,
    pub t_max: usize,
    pub response_cap: usize,
    pub out: Option<PathBuf>,
}

pub fn eval(args: &Eval) -> CliResult<()> {
    let scenario = load_scenarios(std::slice::from_ref(&args.scenario))?.remove(0);
    if args.episodes == 0 || args.t_max == 0 || args.response_cap == 0 {
        return Err(CliError::invalid("--episodes, --t-max and --response-cap must be positive"));
    }
    let loaded = match &args.checkpoint {
        Some(dir) => {
            let params = load_checkpoint(dir)?;
            let vocab = load_vocab(&dir.join(CHECKPOINT_VOCAB))?;
            if params.config.vocab_size != vocab.len() {
                return Err(CliError::invalid(format!(
                    "{}: checkpoint has vocab_size {} but its vocabulary has {} entries",
                    dir.display(),
                    params.config.vocab_size,
                    vocab.len()
                )));
            }
            Some((params, vocab))
        }
        None if args.scripted => None,
        None => return Err(CliError::invalid("eval needs --checkpoint or --scripted")),
    };
    let vocab = match &loaded {
        Some((_, v)) => v.clone(),
        None => build_vocab(&[], std::slice::from_ref(&scenario), args.t_max),
    };
    let context_len = loaded.as_ref().map_or(PolicyConfig::default().context_len, |(p, _)| p.config.context_len);
    let config = EpisodeConfig {
        t_max: args.t_max,
        context_len,
        response_cap: args.response_cap,
        schedule: Default::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = match (&loaded, args.scripted) {
        (_, true) => {
            let mut actor = ScriptedActor::solver(&vocab, &scenario)?;
            evaluate(&scenario, &vocab, &mut actor, args.episodes, &config, &mut rng)?
        }
        (Some((params, _)), false) => {
            let net = params.network();
            let decode = if args.greedy {
                Decode::Greedy
            } else {
                if !(args.temperature > 0.0 && args.temperature.is_finite()) {
                    return Err(CliError::invalid("--temperature must be positive"));
                }
                Decode::Sample { temperature: args.temperature }
            };
            let mut actor = PolicyActor { net: &net, decode, cap: args.response_cap };
            evaluate(&scenario, &vocab, &mut actor, args.episodes, &config, &mut rng)?
        }
        (None, false) => unreachable!("checked above"),
    };

    if let Some(dir) = &args.out {
        create_dir(dir)?;
        for (i, episode) in report.episodes.iter().enumerate() {
            let path = dir.join(format!("episode-{i:03}.jsonl"));
            let file = File::create(&path).map_err(|e| output_error(&path, e))?;
            let mut out = BufWriter::new(file);
            write_replay(&episode.trajectory, &vocab, &mut out)?;
            out.flush().map_err(|e| output_error(&path, e))?;
        }
    }
    println!(
        "{}: successes {}/{}, mean return {:.4}, mean length {:.2}",
        scenario.id,
        report.successes(),
        args.episodes,
        report.mean_return(),
        report.mean_length()
    );
    Ok(())
}

pub fn reward_score(candidate: &Path, reference: &Path) -> CliResult<()> {
    let candidate = read_input(candidate)?;
    let reference = Reference::from_text(&read_input(reference)?);
    let breakdown = score_offline(&candidate, &reference, &OfflineRewardConfig::default());
    println!("{}", serde_json::to_string(&breakdown).expect("breakdown serializes"));
    Ok(())
}

/// Validates each scenario, solves it and replays the solution.
pub fn scenario_check(paths: &[PathBuf]) -> CliResult<()> {
    let mut failures = 0;
    for path in paths {
        match check_one(path) {
            Ok(line) => println!("{line}"),
            Err(e) => {
                println!("{}: {e}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(CliError::invalid(format!("{failures} of {} scenario(s) failed", paths.len())));
    }
    Ok(())
}

fn check_one(path: &Path) -> CliResult<String> {
    let scenario = load_scenario(path)?;
    let solution = solve(&scenario)?;
    let vocab = build_vocab(&[], std::slice::from_ref(&scenario), solution.commands().len());
    let config = EpisodeConfig {
        t_max: solution.commands().len(),
        context_len: PolicyConfig::default().context_len,
        response_cap: PolicyConfig::default().context_len,
        schedule: Default::default(),
    };
    let mut actor = ScriptedActor::solver(&vocab, &scenario)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let episode = run_episode(&scenario, &vocab, &mut actor, &config, &mut rng)?;
    if !episode.captured() {
        return Err(CliError::invalid("solver path does not capture the flag"));
    }
    Ok(format!(
        "{}: ok, {} stages, solved in {} commands, scripted return {:.4}",
        scenario.id,
        scenario.stages.len(),
        solution.commands().len(),
        episode.episode_return.value
    ))
}
