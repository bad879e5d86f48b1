//! `overmod`: dataset generation, training, evaluation, experiments and reports.
//!
//! Exit codes: 0 success, 1 usage error (bad or missing flags), 2 runtime failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

use overmod_core::agents::{
    train_literal_speaker, EvalListener, GroundTruthSpeaker, LiteralSpeaker, RsaSpeaker, Speaker, DEFAULT_LAMBDA,
};
use overmod_core::experiments::{
    self, communication_accuracy, environments, figures, overmodification_rate, plan_subsets, ExperimentConfig,
    MetricsReport, ModelStore, METRICS_JSON, NUM_SUBSETS, REPORT_CSV,
};
use overmod_core::nn::{Checkpoint, EncoderConfig, Head};
use overmod_core::scene::{
    generate_dataset, load_dataset, Color, ContextCondition, EnvironmentConfig, ReferenceGame, Shape,
};
use overmod_core::semantics::{
    train_semantic_function, write_training_log, Ensemble, Precomputed, SemanticModel, TrainingHyperparams,
};

#[derive(Parser, Debug)]
#[command(name = "overmod", version, about = "Reference games with neural literal semantics and RSA speakers")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset (PNG images + manifest.jsonl).
    Gen(GenArgs),
    /// Train one semantic function or literal speaker on a dataset.
    Train(TrainArgs),
    /// Evaluate a speaker against an evaluation listener on a dataset.
    Eval(EvalArgs),
    /// Run experiment 1, 2 or 3 end to end.
    Experiment(ExperimentArgs),
    /// Re-render report artifacts from a finished experiment directory.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EnvName {
    Uniform,
    Typicality,
    LowSalience,
}

impl EnvName {
    fn as_str(self) -> &'static str {
        match self {
            EnvName::Uniform => "uniform",
            EnvName::Typicality => "typicality",
            EnvName::LowSalience => "low-salience",
        }
    }
}

#[derive(clap::Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum)]
    env: EnvName,
    #[arg(long)]
    num_games: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum TrainRole {
    Semantic,
    LiteralSpeaker,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    role: TrainRole,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Train on one of 11 seeded disjoint subsets instead of the whole dataset.
    #[arg(long)]
    subset_index: Option<usize>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Defaults to 0.01 (semantic) or 0.001 (literal speaker).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path; the training log goes next to it as `<stem>.log.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum SpeakerKind {
    Literal,
    Rsa,
    GroundTruth,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Semantic checkpoint of the evaluation listener.
    #[arg(long)]
    listener: PathBuf,
    #[arg(long, value_enum)]
    speaker: SpeakerKind,
    /// Literal-speaker checkpoint, or the RSA ensemble's semantic checkpoints.
    #[arg(long = "model")]
    models: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(clap::Args, Debug)]
struct ExperimentArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    id: u8,
    #[arg(long, default_value_t = 0.1)]
    scale: f64,
    /// Number of seeds; runs seeds 1..=k.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// RSA ensemble size.
    #[arg(long, default_value_t = 3)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = HeadArg::GlobalMax)]
    head: HeadArg,
    /// Resolved configuration (as echoed by a previous run); replaces the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model store; defaults to `<out>/models`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Flatten,
    GlobalMax,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(clap::Args, Debug)]
struct ReportArgs {
    /// Experiment directory holding metrics.json.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Format,
    /// Output directory; defaults to `--in`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
struct Exit(u8, anyhow::Error);

fn usage(e: impl Into<anyhow::Error>) -> Exit {
    Exit(1, e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Exit {
    Exit(2, e.into())
}

trait OrRuntime<T> {
    fn rt(self) -> Result<T, Exit>;
}

impl<T, E: Into<anyhow::Error>> OrRuntime<T> for Result<T, E> {
    fn rt(self) -> Result<T, Exit> {
        self.map_err(runtime)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            if code == 1 {
                eprintln!("\nFor more information, try '--help'.");
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Exit> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()
        .map_err(runtime)?;
    match cli.command {
        Command::Gen(a) => cmd_gen(a, cli.jobs),
        Command::Train(a) => cmd_train(a, cli.jobs),
        Command::Eval(a) => cmd_eval(a, cli.jobs),
        Command::Experiment(a) => cmd_experiment(a, cli.jobs),
        Command::Report(a) => cmd_report(a),
    }
}

fn echo(config: serde_json::Value) {
    eprintln!("config: {config}");
}

fn cmd_gen(a: GenArgs, jobs: usize) -> Result<(), Exit> {
    echo(json!({"command": "gen", "env": a.env.as_str(), "num_games": a.num_games, "seed": a.seed,
                "out": a.out, "jobs": jobs}));
    if a.num_games < 4 {
        return Err(usage(anyhow!("--num-games must be at least 4")));
    }
    let env = EnvironmentConfig::named(a.env.as_str(), a.seed).map_err(usage)?;
    let data = generate_dataset(&env, a.num_games, &a.out).rt()?;

    println!("games: {}", data.games.len());
    for (cond, n) in &data.manifest.header.counts {
        println!("condition {cond}: {n}");
    }
    let mut colors = BTreeMap::new();
    let mut shapes = BTreeMap::new();
    for g in &data.games {
        let s = g.target_spec();
        *colors.entry(s.color.name()).or_insert(0usize) += 1;
        *shapes.entry(s.shape.name()).or_insert(0usize) += 1;
    }
    for (c, n) in &colors {
        println!("target color {c}: {n}");
    }
    for (s, n) in &shapes {
        println!("target shape {s}: {n}");
    }
    let circles: Vec<&ReferenceGame> = data.games.iter().filter(|g| g.target_spec().shape == Shape::Circle).collect();
    if !circles.is_empty() {
        let red = circles.iter().filter(|g| g.target_spec().color == Color::Red).count();
        println!("red-circle target share: {:.4} ({red}/{})", red as f64 / circles.len() as f64, circles.len());
    }
    println!("digest: {}", dir_digest(&a.out).rt()?);
    Ok(())
}

/// SHA-256 over every file (name and bytes, sorted by name) in a directory.
fn dir_digest(dir: &Path) -> anyhow::Result<String> {
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.file_name()))
        .collect::<Result<_, _>>()?;
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let bytes = std::fs::read(dir.join(&name))?;
        h.update(name.to_string_lossy().as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn cmd_train(a: TrainArgs, jobs: usize) -> Result<(), Exit> {
    let semantic = a.role == TrainRole::Semantic;
    let defaults = if semantic {
        TrainingHyperparams::semantic(a.seed)
    } else {
        TrainingHyperparams::literal_speaker(a.seed)
    };
    let hyper = TrainingHyperparams {
        epochs: a.epochs,
        lr: a.lr.unwrap_or(defaults.lr),
        ..defaults
    };
    let encoder = EncoderConfig {
        embed_dim: a.d,
        ..EncoderConfig::default()
    };
    echo(json!({"command": "train", "role": format!("{:?}", a.role), "data": a.data,
                "subset_index": a.subset_index, "encoder": encoder, "hyper": hyper, "out": a.out, "jobs": jobs}));
    hyper.validate().map_err(usage)?;
    encoder.validate().map_err(usage)?;
    if a.subset_index.is_some_and(|i| i >= NUM_SUBSETS) {
        return Err(usage(anyhow!("--subset-index must be below {NUM_SUBSETS}")));
    }

    let data = load_dataset(&a.data).rt()?;
    let mut games: Vec<&ReferenceGame> = data.games.iter().collect();
    if let Some(i) = a.subset_index {
        let usable = games.len() / NUM_SUBSETS * NUM_SUBSETS;
        let ids: Vec<u64> = games[..usable].iter().map(|g| g.id).collect();
        let plan = plan_subsets(&ids, a.seed).rt()?;
        let keep: std::collections::HashSet<u64> = plan.subsets[i].iter().copied().collect();
        games.retain(|g| keep.contains(&g.id));
    }
    eprintln!("training {:?} on {} games", a.role, games.len());

    let log_path = a.out.with_extension("log.csv");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).rt()?;
    }
    let (ck, epoch, metric, value) = if semantic {
        let t = train_semantic_function(&games, &encoder, &hyper).rt()?;
        write_training_log(&log_path, "validation_loss", &t.log).rt()?;
        let v = t.model.validation_loss;
        (t.model.to_checkpoint("semantic").rt()?, t.selected_epoch, "validation BCE", v)
    } else {
        let t = train_literal_speaker(&games, &encoder, &hyper).rt()?;
        write_training_log(&log_path, "validation_exact_match", &t.log).rt()?;
        let v = t.speaker.validation_accuracy;
        (t.speaker.to_checkpoint("literal-speaker").rt()?, t.selected_epoch, "validation exact-match", v)
    };
    ck.save(&a.out).rt()?;
    println!("selected epoch {epoch}: {metric} {value:.6}");
    println!("checkpoint: {}", a.out.display());
    println!("log: {}", log_path.display());
    Ok(())
}

fn load_semantic(path: &Path) -> anyhow::Result<SemanticModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    SemanticModel::from_checkpoint(&ck).with_context(|| format!("{}", path.display()))
}

fn cmd_eval(a: EvalArgs, jobs: usize) -> Result<(), Exit> {
    echo(json!({"command": "eval", "data": a.data, "listener": a.listener,
                "speaker": format!("{:?}", a.speaker), "models": a.models, "lambda": a.lambda, "jobs": jobs}));
    match (a.speaker, a.models.len()) {
        (SpeakerKind::Literal, 1) | (SpeakerKind::GroundTruth, 0) => {}
        (SpeakerKind::Rsa, n) if n >= 1 => {}
        (s, _) => return Err(usage(anyhow!("wrong number of --model checkpoints for speaker {s:?}"))),
    }
    if !(a.lambda >= 0.0 && a.lambda.is_finite()) {
        return Err(usage(anyhow!("--lambda must be finite and >= 0")));
    }
    let data = load_dataset(&a.data).rt()?;
    let games: Vec<&ReferenceGame> = data.games.iter().collect();
    let listener = EvalListener::new(Precomputed::new(load_semantic(&a.listener).rt()?, &games).rt()?);

    let utterances: Vec<Vec<usize>> = match a.speaker {
        SpeakerKind::GroundTruth => GroundTruthSpeaker.speak_all(&games).rt()?,
        SpeakerKind::Literal => {
            let ck = Checkpoint::load(&a.models[0]).rt()?;
            LiteralSpeaker::from_checkpoint(&ck).rt()?.speak_all(&games).rt()?
        }
        SpeakerKind::Rsa => {
            let members = a
                .models
                .iter()
                .map(|p| Ok(Precomputed::new(load_semantic(p)?, &games)?))
                .collect::<anyhow::Result<Vec<_>>>()
                .rt()?;
            let ensemble = Ensemble::new(members).rt()?;
            RsaSpeaker::new(&ensemble, a.lambda).rt()?.speak_all(&games).rt()?
        }
    };

    let pick = |cond: Option<ContextCondition>| {
        let idx: Vec<usize> = (0..games.len()).filter(|&i| cond.is_none_or(|c| games[i].condition == c)).collect();
        (
            idx.iter().map(|&i| games[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| utterances[i].clone()).collect::<Vec<_>>(),
        )
    };
    println!("condition,metric,value,denominator");
    for cond in ContextCondition::ALL.map(Some).into_iter().chain([None]) {
        let (gs, us) = pick(cond);
        if gs.is_empty() {
            continue;
        }
        let f = communication_accuracy(&listener, &gs, &us).rt()?;
        println!("{},accuracy,{},{}", cond.map_or("all", |c| c.name()), f.value(), f.total);
    }
    let (gs, us) = pick(Some(ContextCondition::ShapeNeeded));
    if !gs.is_empty() {
        let f = overmodification_rate(&gs, &us).rt()?;
        println!("shape-needed,overmodification,{},{}", f.value(), f.total);
    }
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs, jobs: usize) -> Result<(), Exit> {
    let cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(usage)?;
            serde_json::from_str::<ExperimentConfig>(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(usage)?
        }
        None => ExperimentConfig {
            scale: a.scale,
            seeds: (1..=a.seeds).collect(),
            ensemble_size: a.n,
            embed_dim: a.d,
            epochs: a.epochs,
            lambda: a.lambda,
            head: match a.head {
                HeadArg::Flatten => Head::Flatten,
                HeadArg::GlobalMax => Head::GlobalMax,
            },
            ..ExperimentConfig::desk(a.id)
        },
    };
    let cache = a.cache_dir.clone().unwrap_or_else(|| a.out.join("models"));
    let config_json = serde_json::to_string(&cfg).map_err(runtime)?;
    echo(json!({"command": "experiment", "experiment": cfg, "out": a.out, "cache_dir": cache, "jobs": jobs}));
    cfg.validate().map_err(usage)?;
    std::fs::create_dir_all(&a.out).rt()?;
    std::fs::write(a.out.join("config.json"), config_json + "\n").rt()?;

    let (total, train, eval) = cfg.split_sizes();
    eprintln!("{total} games per environment: {train} training ({} per subset), {eval} evaluation", train / NUM_SUBSETS);
    let progress = |msg: &str| eprintln!("  {msg}");
    let report = experiments::run_experiment(&cfg, &a.out, &ModelStore::new(cache), &progress).rt()?;
    summarize(&report);
    println!("report: {}", a.out.join(REPORT_CSV).display());
    if !report.complete {
        for f in &report.failures {
            eprintln!("failed: {} seed {} at {}: {}", f.environment, f.seed, f.stage, f.message);
        }
        bail_runtime(format!("PARTIAL RESULTS: {} stage(s) failed; see metrics.json", report.failures.len()))?;
    }
    Ok(())
}

fn bail_runtime(msg: String) -> Result<(), Exit> {
    Err(runtime(anyhow!(msg)))
}

fn fmt_mean(report: &MetricsReport, speaker: &str, condition: &str, metric: &str) -> String {
    match report.find(speaker, condition, metric) {
        Some(a) => match (a.mean, a.ci95) {
            (Some(m), Some(ci)) => format!("{m:.3} ± {ci:.3}"),
            (Some(m), None) => format!("{m:.3}"),
            _ => "NA".into(),
        },
        None => "NA".into(),
    }
}

/// Seed means with 95% CIs for the headline metrics.
fn summarize(report: &MetricsReport) {
    let id = report.config.id;
    for env in environments(id) {
        println!("[{env}]");
        for sp in ["literal", "rsa"] {
            println!(
                "  {sp:8} accuracy {}  overmodification {}",
                fmt_mean(report, sp, &format!("{env}:all"), "overall_accuracy"),
                fmt_mean(report, sp, &format!("{env}:shape-needed"), "overmodification"),
            );
            if id == 2 {
                println!(
                    "  {sp:8} overmodification red circles {}  non-red circles {}",
                    fmt_mean(report, sp, &format!("{env}:shape-needed/red-circle"), "overmodification"),
                    fmt_mean(report, sp, &format!("{env}:shape-needed/non-red-circle"), "overmodification"),
                );
            }
        }
        if id == 2 {
            println!(
                "  applicability gap (circle, red minus non-red) {}",
                fmt_mean(report, "ensemble", &format!("{env}:circle/red-minus-non-red"), "applicability_gap")
            );
        }
    }
    if id == 3 {
        println!("uncertainty       {:>16} {:>16}", "high salience", "low salience");
        let words = Color::ALL
            .iter()
            .map(|c| c.name())
            .chain(Shape::ALL.iter().map(|s| s.name()))
            .chain(["all-colors", "all-shapes"]);
        for w in words {
            println!(
                "  {w:15} {:>16} {:>16}",
                fmt_mean(report, "ensemble", &format!("uniform:{w}"), "uncertainty"),
                fmt_mean(report, "ensemble", &format!("low-salience:{w}"), "uncertainty"),
            );
        }
    }
}

fn cmd_report(a: ReportArgs) -> Result<(), Exit> {
    let out = a.out.clone().unwrap_or_else(|| a.input.clone());
    echo(json!({"command": "report", "in": a.input, "format": format!("{:?}", a.format), "out": out}));
    if !a.input.join(METRICS_JSON).is_file() {
        return Err(runtime(anyhow!("{} not found", a.input.join(METRICS_JSON).display())));
    }
    let report = MetricsReport::read(&a.input).rt()?;
    std::fs::create_dir_all(&out).rt()?;
    let written: Vec<PathBuf> = match a.format {
        Format::Csv => vec![write_text(&out.join(REPORT_CSV), &report.to_csv().rt()?)?],
        Format::Json => vec![write_text(&out.join(METRICS_JSON), &(report.to_json().rt()? + "\n"))?],
        Format::Svg => figures(&report)
            .into_iter()
            .map(|(name, chart)| write_text(&out.join(name), &chart.to_svg()))
            .collect::<Result<_, _>>()?,
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<PathBuf, Exit> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)
        .and_then(|()| std::fs::rename(&tmp, path))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    Ok(path.to_path_buf())
}
