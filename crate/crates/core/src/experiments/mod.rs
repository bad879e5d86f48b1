//! Experiment pipelines: dataset sizing, subset planning, model training
//! (with an on-disk model store), evaluation and reporting.

mod metrics;
mod report;
mod svg;

pub use metrics::{
    applicability_gap, applicability_profile, communication_accuracy, feature_uncertainty, has_color_word, mean_ci,
    overmodification_rate, probe_utterance, truth_listener, Cell, Fraction,
};
pub use report::{aggregate, Aggregate, Failure, MetricsReport, Row, METRICS_JSON, REPORT_CSV};
pub use svg::{figures, Bar, Chart, Group};

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{train_literal_speaker, EvalListener, LiteralSpeaker, RsaSpeaker, Speaker};
use crate::nn::{Checkpoint, EncoderConfig, Head};
use crate::scene::{generate_games, Color, ContextCondition, EnvironmentConfig, ReferenceGame, Shape, Word};
use crate::semantics::{
    train_semantic_function, write_training_log, Ensemble, Precomputed, SemanticModel, TrainingHyperparams,
};
use crate::util::{fnv1a, splitmix};
use crate::{Error, Result};

/// Games at scale 1.
pub const FULL_SCALE_GAMES: usize = 75_000;
pub const NUM_SUBSETS: usize = 11;
/// Ensemble members available in a plan.
pub const MAX_MEMBERS: usize = NUM_SUBSETS - 2;
pub const SPEAKERS: [&str; 2] = ["literal", "rsa"];

/// Training environments an experiment compares, primary first.
pub fn environments(id: u8) -> &'static [&'static str] {
    match id {
        1 => &["uniform"],
        2 => &["typicality", "uniform"],
        _ => &["low-salience", "uniform"],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: u8,
    /// Fraction of the 75,000-game dataset.
    pub scale: f64,
    pub seeds: Vec<u64>,
    /// Ensemble size `n` of the RSA speaker's internal listener.
    pub ensemble_size: usize,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub semantic_lr: f64,
    pub speaker_lr: f64,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub head: Head,
}

impl ExperimentConfig {
    /// Desk-scale defaults: scale 0.1, seeds 1..=3, n = 3, d = 64, 30 epochs.
    pub fn desk(id: u8) -> Self {
        let sem = TrainingHyperparams::semantic(0);
        Self {
            id,
            scale: 0.1,
            seeds: vec![1, 2, 3],
            ensemble_size: 3,
            embed_dim: 64,
            epochs: sem.epochs,
            lambda: crate::agents::DEFAULT_LAMBDA,
            semantic_lr: sem.lr,
            speaker_lr: TrainingHyperparams::literal_speaker(0).lr,
            batch_size: sem.batch_size,
            validation_fraction: sem.validation_fraction,
            head: Head::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.id) {
            return Err(Error::Config(format!("experiment id {} not in 1..=3", self.id)));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config(format!("scale {} outside (0, 1]", self.scale)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.seeds.iter().collect::<HashSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(1..=MAX_MEMBERS).contains(&self.ensemble_size) {
            return Err(Error::Config(format!("ensemble size {} not in 1..={MAX_MEMBERS}", self.ensemble_size)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("cost weight {} must be finite and >= 0", self.lambda)));
        }
        self.encoder().validate()?;
        self.semantic_hyper(0).validate()?;
        self.speaker_hyper(0).validate()?;
        let (_, train, _) = self.split_sizes();
        if (self.validation_fraction * (train / NUM_SUBSETS) as f64).floor() < 1.0 {
            return Err(Error::Config(format!(
                "scale {} leaves {} games per subset, too few to hold out validation games",
                self.scale,
                train / NUM_SUBSETS
            )));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            head: self.head,
            ..EncoderConfig::default()
        }
    }

    pub fn semantic_hyper(&self, seed: u64) -> TrainingHyperparams {
        TrainingHyperparams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.semantic_lr,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }

    pub fn speaker_hyper(&self, seed: u64) -> TrainingHyperparams {
        TrainingHyperparams {
            lr: self.speaker_lr,
            ..self.semantic_hyper(seed)
        }
    }

    /// `(total, train, eval)`: about 73% (55/75) for training, rounded down
    /// to a multiple of 11; the rest is the evaluation split.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let total = (FULL_SCALE_GAMES as f64 * self.scale).round() as usize;
        let train = NUM_SUBSETS * (total / 15);
        (total, train, total - train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    LiteralSpeaker,
    EvalListener,
    /// Zero-based member index.
    RsaMember(usize),
}

impl Role {
    /// Subset index in the plan.
    pub fn subset(self) -> usize {
        match self {
            Role::LiteralSpeaker => 0,
            Role::EvalListener => 1,
            Role::RsaMember(k) => 2 + k,
        }
    }

    /// Checkpoint role tag.
    pub fn tag(self) -> String {
        match self {
            Role::LiteralSpeaker => "literal-speaker".into(),
            Role::EvalListener => "eval-listener".into(),
            Role::RsaMember(k) => format!("rsa-ensemble-member-{}", k + 1),
        }
    }

    pub fn roles(ensemble_size: usize) -> Vec<Role> {
        let mut r = vec![Role::LiteralSpeaker, Role::EvalListener];
        r.extend((0..ensemble_size).map(Role::RsaMember));
        r
    }
}

/// Eleven disjoint, equal training subsets; subset `i` serves the role with
/// `Role::subset() == i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubsetPlan {
    pub subsets: Vec<Vec<u64>>,
}

/// Seeded permutation of the training ids, cut into 11 contiguous slices
/// (each sorted).
pub fn plan_subsets(train_ids: &[u64], seed: u64) -> Result<SubsetPlan> {
    if train_ids.len() < NUM_SUBSETS || !train_ids.len().is_multiple_of(NUM_SUBSETS) {
        return Err(Error::Config(format!(
            "{} training games cannot be split into {NUM_SUBSETS} equal non-empty subsets",
            train_ids.len()
        )));
    }
    let mut ids = train_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5ab5_e7ed)));
    let size = ids.len() / NUM_SUBSETS;
    Ok(SubsetPlan {
        subsets: ids
            .chunks(size)
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_unstable();
                c
            })
            .collect(),
    })
}

/// Training seed of one model: distinct per (experiment seed, role).
pub fn model_seed(seed: u64, role: Role) -> u64 {
    splitmix(splitmix(seed) ^ (role.subset() as u64 + 1))
}

/// Checkpoints keyed by a fingerprint of everything that determines them,
/// so a rerun (or another experiment over the same environment) reuses
/// finished models.
#[derive(Clone, Debug)]
pub struct ModelStore {
    pub dir: PathBuf,
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    kind: &'a str,
    environment: &'a EnvironmentConfig,
    total_games: usize,
    subset: u64,
    encoder: &'a EncoderConfig,
    hyper: &'a TrainingHyperparams,
}

pub enum Trained {
    Speaker(LiteralSpeaker),
    Semantic(SemanticModel),
}

impl ModelStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self, env: &str, seed: u64, role: Role) -> PathBuf {
        self.dir.join(format!("{env}-seed{seed}")).join(format!("{}.ckpt", role.tag()))
    }

    #[allow(clippy::too_many_arguments)]
    fn get_or_train(
        &self,
        cfg: &ExperimentConfig,
        env: &EnvironmentConfig,
        env_name: &str,
        seed: u64,
        total: usize,
        role: Role,
        games: &[&ReferenceGame],
    ) -> Result<(Trained, usize)> {
        let encoder = cfg.encoder();
        let ms = model_seed(seed, role);
        let speaker = role == Role::LiteralSpeaker;
        let hyper = if speaker { cfg.speaker_hyper(ms) } else { cfg.semantic_hyper(ms) };
        let ids: Vec<u8> = games.iter().flat_map(|g| g.id.to_le_bytes()).collect();
        let fp = Fingerprint {
            kind: if speaker { "literal-speaker" } else { "semantic" },
            environment: env,
            total_games: total,
            subset: fnv1a(&ids),
            encoder: &encoder,
            hyper: &hyper,
        };
        let fp = format!(
            "{:016x}",
            fnv1a(serde_json::to_string(&fp).map_err(|e| Error::Config(e.to_string()))?.as_bytes())
        );
        let path = self.path(env_name, seed, role);
        let n_val = (hyper.validation_fraction * games.len() as f64).floor() as usize;
        if let Ok(ck) = Checkpoint::load(&path) {
            if ck.meta("fingerprint").is_ok_and(|f| f == fp) {
                let model = if speaker {
                    Trained::Speaker(LiteralSpeaker::from_checkpoint(&ck)?)
                } else {
                    Trained::Semantic(SemanticModel::from_checkpoint(&ck)?)
                };
                return Ok((model, n_val));
            }
        }
        let dir = path.parent().expect("store paths have a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = path.with_extension("log.csv");
        let (ck, model) = if speaker {
            let t = train_literal_speaker(games, &encoder, &hyper)?;
            write_training_log(&log_path, "validation_exact_match", &t.log)?;
            (t.speaker.to_checkpoint(&role.tag())?, Trained::Speaker(t.speaker))
        } else {
            let t = train_semantic_function(games, &encoder, &hyper)?;
            write_training_log(&log_path, "validation_loss", &t.log)?;
            (t.model.to_checkpoint(&role.tag())?, Trained::Semantic(t.model))
        };
        ck.with("fingerprint", &fp).save(&path)?;
        Ok((model, n_val))
    }
}

struct Rows<'a> {
    id: u8,
    seed: u64,
    env: &'a str,
    rows: Vec<Row>,
}

impl Rows<'_> {
    fn push(&mut self, speaker: &str, scope: &str, metric: &str, value: Option<f64>, denominator: usize) {
        self.rows.push(Row {
            experiment: self.id,
            seed: self.seed,
            speaker: speaker.into(),
            condition: format!("{}:{scope}", self.env),
            metric: metric.into(),
            value,
            denominator,
        });
    }

    fn fraction(&mut self, speaker: &str, scope: &str, metric: &str, f: Fraction) {
        self.push(speaker, scope, metric, Some(f.value()), f.total);
    }
}

fn stage<T>(env: &str, seed: u64, what: &str, r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure {
        environment: env.into(),
        seed,
        stage: what.into(),
        message: e.to_string(),
    })
}

/// Trains and evaluates every agent for one (environment, seed).
pub fn run_environment(
    cfg: &ExperimentConfig,
    env_name: &str,
    seed: u64,
    store: &ModelStore,
    progress: &(dyn Fn(&str) + Sync),
) -> std::result::Result<Vec<Row>, Failure> {
    let env = stage(env_name, seed, "configure", EnvironmentConfig::named(env_name, seed).map_err(Error::from))?;
    let (total, n_train, _) = cfg.split_sizes();
    progress(&format!("{env_name} seed {seed}: generating {total} games"));
    let data = stage(env_name, seed, "generate", generate_games(&env, total).map_err(Error::from))?;
    let (train, eval) = data.games.split_at(n_train);
    let eval: Vec<&ReferenceGame> = eval.iter().collect();
    let train_ids: Vec<u64> = train.iter().map(|g| g.id).collect();
    let plan = stage(env_name, seed, "plan subsets", plan_subsets(&train_ids, seed))?;

    let eval_ids: HashSet<u64> = eval.iter().map(|g| g.id).collect();
    if plan.subsets.iter().flatten().any(|id| eval_ids.contains(id)) {
        return Err(Failure {
            environment: env_name.into(),
            seed,
            stage: "id audit".into(),
            message: "an evaluation game appears in a training subset".into(),
        });
    }
    let by_id: HashMap<u64, &ReferenceGame> = train.iter().map(|g| (g.id, g)).collect();

    let roles = Role::roles(cfg.ensemble_size);
    let trained: Vec<(Trained, usize)> = roles
        .par_iter()
        .map(|&role| {
            let games: Vec<&ReferenceGame> = plan.subsets[role.subset()].iter().map(|id| by_id[id]).collect();
            progress(&format!("{env_name} seed {seed}: {} on {} games", role.tag(), games.len()));
            stage(
                env_name,
                seed,
                &format!("train {}", role.tag()),
                store.get_or_train(cfg, &env, env_name, seed, total, role, &games),
            )
        })
        .collect::<std::result::Result<_, _>>()?;

    progress(&format!("{env_name} seed {seed}: evaluating on {} games", eval.len()));
    stage(env_name, seed, "evaluate", evaluate(cfg, env_name, seed, &roles, trained, &eval))
}

fn evaluate(
    cfg: &ExperimentConfig,
    env: &str,
    seed: u64,
    roles: &[Role],
    trained: Vec<(Trained, usize)>,
    eval: &[&ReferenceGame],
) -> Result<Vec<Row>> {
    let mut out = Rows {
        id: cfg.id,
        seed,
        env,
        rows: Vec::new(),
    };
    let mut literal = None;
    let mut listener = None;
    let mut members = Vec::new();
    for (&role, (model, n_val)) in roles.iter().zip(trained) {
        match model {
            Trained::Speaker(s) => {
                out.push(&role.tag(), "validation", "validation_exact_match", Some(s.validation_accuracy), n_val);
                literal = Some(s);
            }
            Trained::Semantic(m) => {
                out.push(&role.tag(), "validation", "validation_loss", Some(m.validation_loss), n_val);
                let pre = Precomputed::new(m, eval)?;
                if role == Role::EvalListener {
                    listener = Some(pre);
                } else {
                    members.push(pre);
                }
            }
        }
    }
    let literal = literal.expect("a literal speaker is always trained");
    let listener = EvalListener::new(listener.expect("an eval listener is always trained"));
    let ensemble = Ensemble::new(members)?;
    let rsa = RsaSpeaker::new(&ensemble, cfg.lambda)?;

    let said: [Vec<Vec<usize>>; 2] = [
        literal.speak_all(eval)?,
        eval.par_iter().map(|g| rsa.speak(g)).collect::<Result<_>>()?,
    ];
    let truth: Vec<Vec<usize>> = eval.iter().map(|g| g.ground_truth.ids()).collect();

    let select = |keep: &dyn Fn(&ReferenceGame) -> bool, utts: &[Vec<usize>]| {
        let mut gs = Vec::new();
        let mut us = Vec::new();
        for (g, u) in eval.iter().zip(utts) {
            if keep(g) {
                gs.push(*g);
                us.push(u.clone());
            }
        }
        (gs, us)
    };

    for cond in ContextCondition::ALL {
        let (gs, us) = select(&|g| g.condition == cond, &truth);
        let f = communication_accuracy(&listener, &gs, &us)?;
        out.fraction("ground-truth", cond.name(), "listener_accuracy", f);
    }
    for (speaker, utts) in SPEAKERS.iter().zip(&said) {
        for cond in ContextCondition::ALL {
            let (gs, us) = select(&|g| g.condition == cond, utts);
            let f = communication_accuracy(&listener, &gs, &us)?;
            out.fraction(speaker, cond.name(), "accuracy", f);
        }
        out.fraction(speaker, "all", "overall_accuracy", communication_accuracy(&listener, eval, utts)?);
        let exact = utts.iter().zip(&truth).filter(|(u, t)| u == t).count();
        out.fraction(speaker, "all", "exact_match", Fraction { hits: exact, total: eval.len() });

        let shape_needed = |g: &ReferenceGame| g.condition == ContextCondition::ShapeNeeded;
        let (gs, us) = select(&shape_needed, utts);
        out.fraction(speaker, "shape-needed", "overmodification", overmodification_rate(&gs, &us)?);
        if cfg.id == 2 {
            for (scope, red) in [("shape-needed/red-circle", true), ("shape-needed/non-red-circle", false)] {
                let keep = |g: &ReferenceGame| {
                    let s = g.target_spec();
                    shape_needed(g) && s.shape == Shape::Circle && (s.color == Color::Red) == red
                };
                let (gs, us) = select(&keep, utts);
                match gs.is_empty() {
                    true => out.push(speaker, scope, "overmodification", None, 0),
                    false => out.fraction(speaker, scope, "overmodification", overmodification_rate(&gs, &us)?),
                }
            }
        }
    }

    let mut color_u = Vec::new();
    let mut shape_u = Vec::new();
    let features = Color::ALL
        .iter()
        .map(|&c| Word::Color(c))
        .chain(Shape::ALL.iter().map(|&s| Word::Shape(s)));
    let mut n_refs = 0;
    for w in features {
        let (u, n) = feature_uncertainty(&ensemble, eval, w)?;
        n_refs = n;
        out.push("ensemble", w.as_str(), "uncertainty", Some(u), n);
        if w.is_color() { color_u.push(u) } else { shape_u.push(u) }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    out.push("ensemble", "all-colors", "uncertainty", Some(mean(&color_u)), n_refs);
    out.push("ensemble", "all-shapes", "uncertainty", Some(mean(&shape_u)), n_refs);

    if cfg.id == 2 {
        let profile = applicability_profile(&ensemble, Shape::Circle, eval)?;
        for cell in &profile {
            out.push("ensemble", &format!("circle/{}", cell.color.name()), "applicability", cell.mean, cell.count);
        }
        let circles = profile.iter().map(|c| c.count).sum();
        out.push(
            "ensemble",
            "circle/red-minus-non-red",
            "applicability_gap",
            applicability_gap(&profile, Color::Red),
            circles,
        );
    }
    Ok(out.rows)
}

/// Runs every (environment, seed) of an experiment and writes `report.csv`,
/// `metrics.json` and the SVG figures to `out_dir`. Stage failures are
/// recorded in the report (`complete == false`) rather than returned.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    store: &ModelStore,
    progress: &(dyn Fn(&str) + Sync),
) -> Result<MetricsReport> {
    cfg.validate()?;
    let runs: Vec<(&str, u64)> = environments(cfg.id)
        .iter()
        .flat_map(|&e| cfg.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let results: Vec<std::result::Result<Vec<Row>, Failure>> = runs
        .par_iter()
        .map(|&(env, seed)| run_environment(cfg, env, seed, store, progress))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(r) => rows.extend(r),
            Err(f) => failures.push(f),
        }
    }
    let report = MetricsReport::new(cfg.clone(), rows, failures);
    write_outputs(&report, out_dir)?;
    Ok(report)
}

/// `report.csv`, `metrics.json` and one SVG per figure.
pub fn write_outputs(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    report.write(out_dir)?;
    write_figures(report, out_dir).map(drop)
}

pub fn write_figures(report: &MetricsReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (name, chart) in figures(report) {
        let path = out_dir.join(name);
        crate::util::write_atomic(&path, chart.to_svg().as_bytes()).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
