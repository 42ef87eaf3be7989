//! `niab`: corpus generation, training, evaluation, single-episode replay and
//! ablation sweeps over one TOML configuration.
//!
//! Exit codes: 0 on success, 1 when an input or configuration is invalid, 2
//! when execution itself fails (I/O, numerical faults, simulator faults).

mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use niab_core::embedding::{Embedder, EmbeddingError};
use niab_core::episode::{parse_corpus, serialize_corpus, ActionToken, Corpus, EpisodeError};
use niab_core::eval::{evaluate, EvalError, EvalOptions, EvalReport, Policy, Prediction};
use niab_core::ranker::{load_checkpoint, RankerConfig, RankerError, RankerParams, Scoring};
use niab_core::scene::{generate_corpus_with, split_corpus, write_vocabularies, SceneError};
use niab_core::sim::SimError;
use niab_core::trainer::{train, Ablation, EpochMetrics, TrainError};

use config::{output_dir, Config};

/// Marks an error as a validation failure (exit code 1).
#[derive(Debug)]
pub struct Invalid(String);

impl Invalid {
    pub fn new(msg: impl Into<String>) -> anyhow::Error {
        anyhow::Error::new(Invalid(msg.into()))
    }

    pub fn wrap(e: impl fmt::Display) -> anyhow::Error {
        Invalid::new(e.to_string())
    }
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "niab", version, about = "Benchmark harness and retrieve-then-rank model for proactive robot assistance")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Embedding source: `hashing` or `table:<path>`.
    #[arg(long, global = true)]
    embedder: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a corpus and snapshot the scene vocabularies.
    Gen(GenArgs),
    /// Split a corpus into stratified train and validation folds.
    Split(SplitArgs),
    /// Train the ranker.
    Train(TrainArgs),
    /// Evaluate a policy on a corpus.
    Eval(EvalArgs),
    /// Replay one episode and print its traces.
    Run(RunArgs),
    /// Train and evaluate the full model and both ablations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct OutArg {
    /// Output directory (default: `$NIAB_OUTPUT_ROOT/<subcommand>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of episodes.
    #[arg(long = "n")]
    n_episodes: Option<usize>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Training seed (initialisation and shuffling).
    #[arg(long)]
    seed: Option<u64>,
    /// Record 0 instead of the measured wall time so metrics logs are reproducible.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct PolicyArgs {
    /// model, random, cosine_top1, oracle or no_op.
    #[arg(long)]
    policy: Option<String>,
    /// Checkpoint for the `model` policy.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Candidate construction; inferred from an action-only checkpoint.
    #[arg(long)]
    ablation: Option<String>,
    /// Seed of the random policy.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Store the full logit matrices in the report.
    #[arg(long)]
    keep_logits: bool,
    /// Also write summary.csv and episodes.csv.
    #[arg(long)]
    emit_csv: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    episode: String,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Explicit assistance step (with --action) instead of a policy.
    #[arg(long, requires = "action")]
    step: Option<usize>,
    #[arg(long, requires = "step")]
    action: Option<String>,
    /// Print the run report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_wall_time: bool,
    #[command(flatten)]
    out: OutArg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == 1 { "invalid input" } else { "execution fault" };
            eprintln!("error ({kind}): {e:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(e) = cli.embedder {
        config.embedder.source = e;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(config, a),
        Command::Split(a) => cmd_split(config, a),
        Command::Train(a) => cmd_train(config, a),
        Command::Eval(a) => cmd_eval(config, a),
        Command::Run(a) => cmd_run(config, a),
        Command::Ablate(a) => cmd_ablate(config, a),
    }
}

fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Invalid::new(format!("reading {}: {e}", path.display())))?;
    let corpus = parse_corpus(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(corpus)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn parse_ablation(s: &str) -> Result<Ablation> {
    Ablation::parse(s).ok_or_else(|| Invalid::new(format!("unknown ablation `{s}` (full, no_retrieval, action_only)")))
}

fn cmd_gen(mut config: Config, a: GenArgs) -> Result<()> {
    if let Some(s) = a.seed {
        config.gen.seed = s;
    }
    if let Some(n) = a.n_episodes {
        config.gen.n_episodes = n;
    }
    let dir = output_dir(a.out.out, "gen")?;
    let vocabs = config.vocabularies()?;
    let sim = config.simulator()?;
    let corpus = generate_corpus_with(&config.gen, &sim)?;
    write_file(&dir.join("corpus.jsonl"), serialize_corpus(&corpus))?;
    let vocab_dir = dir.join("vocab");
    write_vocabularies(&vocabs, &vocab_dir).with_context(|| format!("writing {}", vocab_dir.display()))?;
    config.write_effective(&dir)?;
    println!("wrote {} episodes to {}", corpus.len(), dir.join("corpus.jsonl").display());
    Ok(())
}

fn cmd_split(mut config: Config, a: SplitArgs) -> Result<()> {
    if let Some(f) = a.val_fraction {
        config.split.val_fraction = f;
    }
    if let Some(s) = a.seed {
        config.split.seed = s;
    }
    let corpus = read_corpus(&a.corpus)?;
    let vf = config.split.val_fraction;
    let (train, val) = split_corpus(&corpus, (1.0 - vf, vf), config.split.seed)?;
    let dir = output_dir(a.out.out, "split")?;
    write_file(&dir.join("train.jsonl"), serialize_corpus(&train))?;
    write_file(&dir.join("val.jsonl"), serialize_corpus(&val))?;
    config.write_effective(&dir)?;
    println!("train {} / val {} episodes in {}", train.len(), val.len(), dir.display());
    Ok(())
}

fn apply_train_flags(config: &mut Config, f: &TrainFlags) -> Result<()> {
    if let Some(a) = &f.ablation {
        config.train.ablation = parse_ablation(a)?;
    }
    if let Some(e) = f.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = f.lr {
        config.train.learning_rate = lr;
    }
    if let Some(b) = f.batch_size {
        config.train.batch_size = b;
    }
    if let Some(s) = f.seed {
        config.train.seed = s;
    }
    if f.no_wall_time {
        config.train.log_wall_time = false;
    }
    Ok(())
}

fn print_epoch(m: &EpochMetrics) {
    match m.val_selection_acc {
        Some(acc) => eprintln!("epoch {:>3}  loss {:.5}  val SelectionAcc {:.4}", m.epoch, m.train_loss, acc),
        None => eprintln!("epoch {:>3}  loss {:.5}", m.epoch, m.train_loss),
    }
}

fn cmd_train(mut config: Config, a: TrainArgs) -> Result<()> {
    apply_train_flags(&mut config, &a.flags)?;
    let (embedder, ranker) = config.embedder_and_ranker()?;
    let train_corpus = read_corpus(&a.train)?;
    let val = a.val.as_deref().map(read_corpus).transpose()?;
    let dir = output_dir(a.out.out, "train")?;
    config.write_effective(&dir)?;
    let outcome = train(&train_corpus, val.as_ref(), &embedder, &ranker, &config.train, Some(&dir), &mut print_epoch)?;
    println!(
        "trained {} examples for {} epochs; best epoch {}; checkpoints in {}",
        outcome.n_examples,
        outcome.metrics.len(),
        outcome.best_epoch,
        dir.display()
    );
    Ok(())
}

/// Policy, model and evaluation options resolved from flags and config.
struct Resolved {
    embedder: Embedder,
    model: Option<(RankerParams, RankerConfig)>,
    opts: EvalOptions,
}

fn resolve_policy(config: &mut Config, a: &PolicyArgs) -> Result<Resolved> {
    if let Some(p) = &a.policy {
        config.eval.policy = Policy::parse(p)
            .ok_or_else(|| Invalid::new(format!("unknown policy `{p}` (model, random, cosine_top1, oracle, no_op)")))?;
    }
    if let Some(s) = a.seed {
        config.eval.seed = s;
    }
    if let Some(ab) = &a.ablation {
        config.train.ablation = parse_ablation(ab)?;
    }
    let (embedder, mut ranker) = config.embedder_and_ranker()?;
    let model = match (config.eval.policy, &a.checkpoint) {
        (Policy::Model, None) => return Err(Invalid::new("policy `model` needs --checkpoint")),
        (_, Some(path)) => {
            let (ckpt_config, params) = load_checkpoint(path)?;
            if ckpt_config.input_dim != embedder.dim() {
                return Err(Invalid::new(format!(
                    "checkpoint expects {}-dimensional embeddings, the embedder gives {}",
                    ckpt_config.input_dim,
                    embedder.dim()
                )));
            }
            if ckpt_config.scoring == Scoring::ActionOnly {
                config.train.ablation = Ablation::ActionOnly;
            } else if config.train.ablation == Ablation::ActionOnly {
                return Err(Invalid::new("ablation action_only needs an action-only checkpoint"));
            }
            config.ranker = ckpt_config.clone();
            ranker = ckpt_config;
            Some((params, ranker.clone()))
        }
        (_, None) => None,
    };
    let opts = EvalOptions {
        policy: config.eval.policy,
        spec: config.train.candidate_spec(&ranker),
        seed: config.eval.seed,
        keep_logits: config.eval.keep_logits,
    };
    Ok(Resolved { embedder, model, opts })
}

fn summary_line(r: &EvalReport) -> String {
    format!(
        "{}: SelectionAcc {:.4} (units {:.4}, action-only {:.4})  mean HSS {:.4}  SuccessAcc {:.4}  over {} episodes",
        r.policy.as_str(),
        r.selection_acc,
        r.selection_acc_units,
        r.selection_acc_action_only,
        r.mean_hss,
        r.success_acc,
        r.n_episodes
    )
}

fn cmd_eval(mut config: Config, a: EvalArgs) -> Result<()> {
    if a.keep_logits {
        config.eval.keep_logits = true;
    }
    if a.emit_csv {
        config.eval.emit_csv = true;
    }
    let corpus = read_corpus(&a.corpus)?;
    let r = resolve_policy(&mut config, &a.policy)?;
    let sim = config.simulator()?;
    let model = r.model.as_ref().map(|(p, c)| (p, c));
    let report = evaluate(&corpus, &r.embedder, &sim, model, &r.opts)?;
    let dir = output_dir(a.out.out, "eval")?;
    config.write_effective(&dir)?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    if config.eval.emit_csv {
        write_file(&dir.join("summary.csv"), report.summary_csv())?;
        write_file(&dir.join("episodes.csv"), report.episodes_csv())?;
    }
    println!("{}", summary_line(&report));
    Ok(())
}

fn cmd_run(mut config: Config, a: RunArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let episode = corpus
        .episodes
        .iter()
        .find(|e| e.episode_id == a.episode)
        .ok_or_else(|| Invalid::new(format!("episode `{}` not in {}", a.episode, a.corpus.display())))?;
    let single = Corpus::new(vec![episode.clone()]);
    let sim = config.simulator()?;
    let (prediction, source) = match (a.step, &a.action) {
        (Some(step), Some(action)) => {
            let action = ActionToken::new(action.as_str())?;
            (Prediction { episode_id: episode.episode_id.clone(), step, action, candidates: vec![], logits: None }, "manual".to_string())
        }
        _ => {
            let r = resolve_policy(&mut config, &a.policy)?;
            let model = r.model.as_ref().map(|(p, c)| (p, c));
            let mut preds = niab_core::eval::policy_predictions(&single, &r.embedder, model, &r.opts)?;
            (preds.remove(0), r.opts.policy.as_str().to_string())
        }
    };
    let report = if episode.human_task_seq.is_empty() {
        sim.run_unassisted(episode)?
    } else {
        sim.run_assisted(episode, prediction.step, &prediction.action)?
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("episode {} ({})", episode.episode_id, episode.scene);
    for (i, t) in episode.human_task_seq.iter().enumerate() {
        let marks: Vec<String> = episode
            .oracle_labels
            .iter()
            .filter(|l| l.human_step_idx == i)
            .map(|l| format!("oracle: {}", l.best_robot_action))
            .collect();
        let skipped = if report.skipped_steps.contains(&i) { "  [skipped]" } else { "" };
        let marks = if marks.is_empty() { String::new() } else { format!("  ({})", marks.join(", ")) };
        println!("  step {i:>2}: {t}{skipped}{marks}");
    }
    println!("assistance ({source}): {} before step {}", prediction.action, prediction.step);
    println!("robot outcome: {}", serde_json::to_string(&report.robot_outcome)?);
    println!("robot trace:");
    for t in &report.robot_trace {
        println!("  before step {:>2}: {}", t.step, t.primitive);
    }
    println!("human trace:");
    for t in &report.human_trace {
        println!("  step {:>2}: {}", t.step, t.primitive);
    }
    for s in &report.skipped_steps {
        println!("skip event: human step {s} ({}) already satisfied", episode.human_task_seq[*s]);
    }
    println!(
        "human primitives: {} unassisted, {} assisted; HSS {}; success {}",
        report.h_human, report.h_assist, report.hss, report.success
    );
    Ok(())
}

/// One line of the ablation table.
#[derive(Debug, Serialize)]
struct AblationRow {
    variant: String,
    best_epoch: usize,
    selection_acc: f64,
    selection_acc_units: f64,
    selection_acc_action_only: f64,
    mean_hss: f64,
    success_acc: f64,
}

fn cmd_ablate(mut config: Config, a: AblateArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    if a.no_wall_time {
        config.train.log_wall_time = false;
    }
    let (embedder, ranker) = config.embedder_and_ranker()?;
    let train_corpus = read_corpus(&a.train)?;
    let val = read_corpus(&a.val)?;
    let sim = config.simulator()?;
    let dir = output_dir(a.out.out, "ablate")?;
    config.write_effective(&dir)?;

    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        eprintln!("== {}", ablation.as_str());
        let mut variant = config.clone();
        variant.train.ablation = ablation;
        let sub = dir.join(ablation.as_str());
        std::fs::create_dir_all(&sub).with_context(|| format!("creating {}", sub.display()))?;
        variant.write_effective(&sub)?;
        let outcome = train(&train_corpus, Some(&val), &embedder, &ranker, &variant.train, Some(&sub), &mut print_epoch)?;
        let opts = EvalOptions {
            policy: Policy::Model,
            spec: variant.train.candidate_spec(&outcome.ranker),
            seed: variant.eval.seed,
            keep_logits: false,
        };
        let report = evaluate(&val, &embedder, &sim, Some((&outcome.best, &outcome.ranker)), &opts)?;
        write_file(&sub.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        eprintln!("{}", summary_line(&report));
        rows.push(AblationRow {
            variant: ablation.as_str().to_string(),
            best_epoch: outcome.best_epoch,
            selection_acc: report.selection_acc,
            selection_acc_units: report.selection_acc_units,
            selection_acc_action_only: report.selection_acc_action_only,
            mean_hss: report.mean_hss,
            success_acc: report.success_acc,
        });
    }

    let mut csv = String::from("variant,best_epoch,selection_acc,selection_acc_units,selection_acc_action_only,mean_hss,success_acc\n");
    let mut md = String::from(
        "| variant | best epoch | SelectionAcc | units | action only | mean HSS | SuccessAcc |\n|---|---|---|---|---|---|---|\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.variant, r.best_epoch, r.selection_acc, r.selection_acc_units, r.selection_acc_action_only, r.mean_hss, r.success_acc
        ));
        md.push_str(&format!(
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.variant, r.best_epoch, r.selection_acc, r.selection_acc_units, r.selection_acc_action_only, r.mean_hss, r.success_acc
        ));
    }
    write_file(&dir.join("ablation.csv"), &csv)?;
    write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    write_file(&dir.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(v) = classify(cause) {
            return if v { 1 } else { 2 };
        }
    }
    2
}

/// `Some(true)` for validation errors, `Some(false)` for execution faults,
/// `None` when the error type says nothing (look further down the chain).
fn classify(e: &(dyn std::error::Error + 'static)) -> Option<bool> {
    if e.is::<Invalid>() || e.is::<EpisodeError>() || e.is::<SceneError>() || e.is::<serde_json::Error>() {
        return Some(true);
    }
    if let Some(e) = e.downcast_ref::<EmbeddingError>() {
        return Some(embedding_invalid(e));
    }
    if let Some(e) = e.downcast_ref::<RankerError>() {
        return Some(ranker_invalid(e));
    }
    if let Some(e) = e.downcast_ref::<SimError>() {
        return Some(sim_invalid(e));
    }
    if let Some(e) = e.downcast_ref::<TrainError>() {
        return Some(train_invalid(e));
    }
    if let Some(e) = e.downcast_ref::<EvalError>() {
        return Some(eval_invalid(e));
    }
    if e.is::<std::io::Error>() {
        return Some(false);
    }
    None
}

fn embedding_invalid(e: &EmbeddingError) -> bool {
    !matches!(e, EmbeddingError::Io(_))
}

fn ranker_invalid(e: &RankerError) -> bool {
    !matches!(e, RankerError::Io(_) | RankerError::NonFiniteActivation | RankerError::NonFiniteGradient)
}

fn sim_invalid(e: &SimError) -> bool {
    matches!(e, SimError::NoExpansion(_) | SimError::InvalidPrediction { .. } | SimError::BadData(_))
}

fn train_invalid(e: &TrainError) -> bool {
    match e {
        TrainError::Ranker(r) => ranker_invalid(r),
        TrainError::Embedding(r) => embedding_invalid(r),
        TrainError::Eval(r) => eval_invalid(r),
        TrainError::Io(_) => false,
        TrainError::TargetMasked { .. } | TrainError::TargetMissing { .. } | TrainError::BadConfig(_) => true,
    }
}

fn eval_invalid(e: &EvalError) -> bool {
    match e {
        EvalError::MissingPrediction(_) | EvalError::MissingModel => true,
        EvalError::Ranker(r) => ranker_invalid(r),
        EvalError::Embedding(r) => embedding_invalid(r),
        EvalError::Sim(r) => sim_invalid(r),
        EvalError::Prepare(r) => train_invalid(r),
    }
}
