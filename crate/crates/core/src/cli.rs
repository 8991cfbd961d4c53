//! Command-line entry point: `train`, `evaluate`, `verify-game`, `report`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, TrainerKind};
use crate::data::{load_mnist_dir, DatasetSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, RobustnessReport};
use crate::game_lab::{random_game_suite, run_mwu_on_game, verify_convex_ensemble, verify_suite, ConvexGame, ConvexReport, OracleSlack, SuiteReport};
use crate::model::{Classifier, Ensemble};
use crate::trainers::{train_greedy, train_mwu_scalable, train_round_robin, train_single, TrainLog};

#[derive(Parser, Debug)]
#[command(name = "multirep", version, about = "Adversarial training across several perturbation sets and representation spaces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and write checkpoints and training logs.
    Train(RunArgs),
    /// Evaluate trained checkpoints and write robustness reports.
    Evaluate(EvalArgs),
    /// Check the multiplicative-weights guarantee on random matrix games.
    VerifyGame(GameArgs),
    /// Merge per-seed reports into one mean ± std table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only, instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on training examples (stratified).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    trainer: Option<String>,
    /// Number of final snapshots averaged (and kept on disk).
    #[arg(long)]
    h: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    restarts: Option<usize>,
    /// Evaluate the ensemble of the last h snapshots instead of the model.
    #[arg(long)]
    ensemble: bool,
}

#[derive(Args, Debug)]
struct GameArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random games.
    #[arg(long, default_value_t = 100)]
    games: usize,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Slack of the second, adversarial-oracle pass.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    /// JSON report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON files to merge.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => train(&a).map(|_| true),
        Command::Evaluate(a) => evaluate(&a).map(|_| true),
        Command::VerifyGame(a) => verify_game(&a),
        Command::Report(a) => report(&a).map(|_| true),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(n) = args.subset {
        cfg.data.train_subset = Some(n);
    }
    if let Some(o) = &args.out {
        cfg.output = o.clone();
    }
    if let Some(t) = &args.trainer {
        cfg.trainer = t.parse()?;
    }
    if let Some(h) = args.h {
        cfg.mwu.window = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    let (train, test) = load_mnist_dir(&cfg.data.path)?;
    DatasetSplit::new(&train, test, cfg.data.split_seed)?.subset(cfg.data.train_subset, cfg.data.test_subset)
}

fn seed_dir(cfg: &RunConfig, seed: u64) -> PathBuf {
    cfg.output.join(format!("seed-{seed}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let split = load_split(&cfg)?;
    let shape = split.train.image_shape();
    let arch = cfg.architecture(shape, split.train.num_classes().max(10))?;
    let mut arms = cfg.build_arms(shape)?;
    create_dir(&cfg.output)?;
    write(&cfg.output.join("run.toml"), &cfg.to_toml()?)?;
    for &seed in &cfg.seeds {
        let init = Classifier::he_init(arch.clone(), seed);
        let mwu = crate::trainers::MwuConfig { seed, ..cfg.mwu.clone() };
        arms.iter_mut().for_each(|a| a.reset_weight());
        let outcome = match cfg.trainer {
            TrainerKind::Mwu => train_mwu_scalable(&init, &mut arms, &split, &mwu)?,
            TrainerKind::Greedy => train_greedy(&init, &mut arms, &split, &mwu)?,
            TrainerKind::RoundRobin => train_round_robin(&init, &mut arms, &split, &mwu)?,
            TrainerKind::Single => train_single(&init, &arms[0], &split, &mwu)?,
        };
        let dir = seed_dir(&cfg, seed);
        create_dir(&dir)?;
        outcome.model.save(&dir.join("model.ckpt"))?;
        outcome.log.save(&dir.join("train_log.jsonl"))?;
        for snap in outcome.window(mwu.window) {
            snap.to_classifier().save(&dir.join(format!("snapshot-{}.ckpt", snap.step())))?;
        }
        let last = outcome.log.records.last().expect("at least one step");
        println!(
            "seed {seed}: {} steps, final p {:?}, arm usage {:?} -> {}",
            last.step,
            last.p,
            outcome.log.total_counts(),
            dir.display()
        );
    }
    Ok(())
}

fn load_window(dir: &Path, h: usize) -> Result<Vec<Classifier>> {
    let log = TrainLog::load(&dir.join("train_log.jsonl"))?;
    let steps: Vec<usize> = log.records.iter().map(|r| r.snapshot_id).collect();
    if h == 0 || h > steps.len() {
        return Err(Error::invalid("evaluate", format!("window {h} outside 1..={}", steps.len())));
    }
    steps[steps.len() - h..]
        .iter()
        .map(|t| Classifier::load(&dir.join(format!("snapshot-{t}.ckpt"))))
        .collect()
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let mut cfg = resolve(&args.run)?;
    if let Some(r) = args.restarts {
        cfg.eval_restarts = r;
        cfg.validate()?;
    }
    let split = load_split(&cfg)?;
    let arms = cfg.build_arms(split.test.image_shape())?;
    let stem = if args.ensemble { "ensemble-report" } else { "report" };
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(&cfg, seed);
        let report = if args.ensemble {
            let ens = Ensemble::new(load_window(&dir, cfg.mwu.window)?)?;
            evaluate_all(&ens, &arms, &split.test, &[seed])?
        } else {
            let model = Classifier::load(&dir.join("model.ckpt"))?;
            evaluate_all(&model, &arms, &split.test, &[seed])?
        };
        report.check_ordering()?;
        report.save_json(&dir.join(format!("{stem}.json")))?;
        report.save_csv(&dir.join(format!("{stem}.csv")))?;
        reports.push(report);
    }
    let merged = RobustnessReport::merge(&reports)?;
    merged.save_json(&cfg.output.join(format!("{stem}.json")))?;
    merged.save_csv(&cfg.output.join(format!("{stem}.csv")))?;
    print_table(&merged);
    Ok(())
}

fn print_table(r: &RobustnessReport) {
    println!("{:<20} {:>8} {:>8}", "metric", "mean", "std");
    let row = |name: &str, m: &crate::eval::MetricSummary| println!("{name:<20} {:>8.2} {:>8.2}", m.mean, m.std);
    row("natural", &r.natural_accuracy);
    for (name, m) in &r.per_arm {
        row(name, m);
    }
    row("min", &r.min_accuracy);
    row("union", &r.union_accuracy);
}

#[derive(serde::Serialize)]
struct GameSuiteOutput {
    exact: SuiteReport,
    slack: SuiteReport,
    convex: Vec<ConvexReport>,
    pass: bool,
}

/// Linear softmax models on two features and two classes, attacked over
/// 9-point ℓ∞ grids of three radii.
pub fn convex_suite(count: usize, seed: u64) -> Result<Vec<ConvexReport>> {
    (0..count as u64)
        .map(|i| {
            let game = ConvexGame::random(2, 2, 8, 12, &[0.05, 0.2, 0.5], seed.wrapping_add(i));
            let matrix = game.to_matrix_game()?;
            let (_, trace) = run_mwu_on_game(&matrix, 0.2, 5, OracleSlack::exact())?;
            verify_convex_ensemble(&trace, &game)
        })
        .collect()
}

fn verify_game(args: &GameArgs) -> Result<bool> {
    let games = random_game_suite(args.games, 30, 6, args.seed)?;
    let exact = verify_suite(&games, args.eps, OracleSlack::exact())?;
    let slack = verify_suite(&games, args.eps, OracleSlack::adversarial(args.delta)?)?;
    let convex = convex_suite(20, args.seed)?;
    let pass = exact.pass && slack.pass && convex.iter().all(|c| c.pass);
    let out = GameSuiteOutput {
        exact,
        slack,
        convex,
        pass,
    };
    let json = serde_json::to_string_pretty(&out)?;
    match &args.out {
        Some(path) => write(path, &json)?,
        None => println!("{json}"),
    }
    eprintln!(
        "exact oracle {}/{}, slack {} oracle {}/{}, convex ensemble {}/{}",
        out.exact.passed,
        out.exact.total,
        args.delta,
        out.slack.passed,
        out.slack.total,
        out.convex.iter().filter(|c| c.pass).count(),
        out.convex.len()
    );
    Ok(pass)
}

fn report(args: &ReportArgs) -> Result<()> {
    let reports = args.reports.iter().map(|p| RobustnessReport::load_json(p)).collect::<Result<Vec<_>>>()?;
    let merged = RobustnessReport::merge(&reports)?;
    merged.check_ordering()?;
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        merged.save_json(&dir.join("report.json"))?;
        merged.save_csv(&dir.join("report.csv"))?;
    }
    print_table(&merged);
    Ok(())
}
