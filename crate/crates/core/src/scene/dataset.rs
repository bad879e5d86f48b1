//! Dataset generation and the on-disk manifest.
//!
//! A dataset directory holds `manifest.jsonl` and one PNG per referent named
//! `<game-id>_<referent-index>.png`. The first manifest line is a header:
//!
//! ```text
//! {"format":"overmod-dataset v1","environment":{...},"num_games":N,"counts":{"color-needed":n,...}}
//! ```
//!
//! followed by one record per game, in id order:
//!
//! ```text
//! {"id":0,"condition":"color-needed","target_index":2,
//!  "referents":[{"color":"red","shape":"circle","size":23,"aspect":1.0,
//!                "center":[30.5,12.5],"salience_pixel":null,"image":"000000_0.png"},...],
//!  "ground_truth":["red","shape"]}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::game::{check_condition, generate_game, ground_truth_utterance, ContextCondition, ReferenceGame, Referent};
use super::render::{render, EnvironmentConfig, Image, Salience, SceneSpec};
use super::vocab::{Color, Shape, Utterance};
use super::SceneError;
use crate::util::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const FORMAT: &str = "overmod-dataset v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub environment: EnvironmentConfig,
    pub num_games: usize,
    pub counts: BTreeMap<ContextCondition, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferentRecord {
    pub color: Color,
    pub shape: Shape,
    pub size: u32,
    pub aspect: f64,
    pub center: (f64, f64),
    pub salience_pixel: Option<(u32, u32)>,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub id: u64,
    pub condition: ContextCondition,
    pub target_index: usize,
    pub referents: Vec<ReferentRecord>,
    pub ground_truth: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub games: Vec<GameRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String, SceneError> {
        let mut out = serde_json::to_string(&self.header).map_err(|e| SceneError::Manifest(e.to_string()))?;
        out.push('\n');
        for g in &self.games {
            out.push_str(&serde_json::to_string(g).map_err(|e| SceneError::Manifest(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn read(dir: &Path) -> Result<Self, SceneError> {
        let path = dir.join(MANIFEST_FILE);
        let file = std::fs::File::open(&path).map_err(|e| SceneError::io(&path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |line: usize, e: &dyn std::fmt::Display| SceneError::Manifest(format!("{}:{line}: {e}", path.display()));
        let first = lines
            .next()
            .ok_or_else(|| bad(1, &"empty manifest"))?
            .map_err(|e| SceneError::io(&path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
        if header.format != FORMAT {
            return Err(bad(1, &format!("unsupported format `{}`", header.format)));
        }
        let mut games = Vec::with_capacity(header.num_games);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| SceneError::io(&path, e))?;
            games.push(serde_json::from_str(&line).map_err(|e| bad(i + 2, &e))?);
        }
        if games.len() != header.num_games {
            return Err(bad(0, &format!("header announces {} games, found {}", header.num_games, games.len())));
        }
        Ok(Self { header, games })
    }
}

/// Games plus the manifest describing them.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub games: Vec<ReferenceGame>,
}

impl Dataset {
    pub fn environment(&self) -> &EnvironmentConfig {
        &self.manifest.header.environment
    }
}

pub fn image_name(id: u64, referent: usize) -> String {
    format!("{id:06}_{referent}.png")
}

fn record(game: &ReferenceGame) -> GameRecord {
    GameRecord {
        id: game.id,
        condition: game.condition,
        target_index: game.target,
        referents: game
            .referents
            .iter()
            .enumerate()
            .map(|(i, r)| ReferentRecord {
                color: r.spec.color,
                shape: r.spec.shape,
                size: r.spec.size,
                aspect: r.spec.aspect,
                center: r.spec.center,
                salience_pixel: r.spec.salience_pixel,
                image: image_name(game.id, i),
            })
            .collect(),
        ground_truth: game.ground_truth.strings(),
    }
}

fn manifest_for(env: &EnvironmentConfig, games: &[ReferenceGame]) -> DatasetManifest {
    let mut counts: BTreeMap<ContextCondition, usize> = ContextCondition::ALL.iter().map(|&c| (c, 0)).collect();
    for g in games {
        *counts.entry(g.condition).or_default() += 1;
    }
    DatasetManifest {
        header: ManifestHeader {
            format: FORMAT.to_string(),
            environment: env.clone(),
            num_games: games.len(),
            counts,
        },
        games: games.iter().map(record).collect(),
    }
}

/// Generates games `0..num_games` in memory. Conditions cycle by id, so each
/// condition receives `num_games / 4` games plus the round-robin remainder.
pub fn generate_games(env: &EnvironmentConfig, num_games: usize) -> Result<Dataset, SceneError> {
    if num_games < 4 {
        return Err(SceneError::Config(format!("need at least 4 games, got {num_games}")));
    }
    env.validate()?;
    let games = (0..num_games as u64)
        .into_par_iter()
        .map(|id| generate_game(env, id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        manifest: manifest_for(env, &games),
        games,
    })
}

/// Generates a dataset and writes its images and manifest to `out_dir`.
pub fn generate_dataset(env: &EnvironmentConfig, num_games: usize, out_dir: &Path) -> Result<Dataset, SceneError> {
    let data = generate_games(env, num_games)?;
    write_dataset(&data, out_dir)?;
    Ok(data)
}

pub fn write_dataset(data: &Dataset, out_dir: &Path) -> Result<(), SceneError> {
    std::fs::create_dir_all(out_dir).map_err(|e| SceneError::io(out_dir, e))?;
    data.games.par_iter().try_for_each(|g| -> Result<(), SceneError> {
        for (i, r) in g.referents.iter().enumerate() {
            let path = out_dir.join(image_name(g.id, i));
            write_atomic(&path, &r.image.encode_png()?).map_err(|e| SceneError::io(&path, e))?;
        }
        Ok(())
    })?;
    let path = out_dir.join(MANIFEST_FILE);
    write_atomic(&path, data.manifest.to_jsonl()?.as_bytes()).map_err(|e| SceneError::io(&path, e))
}

/// Reads a dataset directory, checking every image against its record.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SceneError> {
    let manifest = DatasetManifest::read(dir)?;
    let env = manifest.header.environment.clone();
    let games = manifest
        .games
        .par_iter()
        .map(|rec| load_game(dir, &env, rec))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest, games })
}

fn load_game(dir: &Path, env: &EnvironmentConfig, rec: &GameRecord) -> Result<ReferenceGame, SceneError> {
    let malformed = |reason: String| SceneError::MalformedGame { id: rec.id, reason };
    if rec.referents.len() != 3 || rec.target_index > 2 {
        return Err(malformed("expected three referents and a target index below 3".into()));
    }
    let mut refs = Vec::with_capacity(3);
    for r in &rec.referents {
        let spec = SceneSpec {
            color: r.color,
            shape: r.shape,
            size: r.size,
            aspect: r.aspect,
            center: r.center,
            salience_pixel: r.salience_pixel,
        };
        if spec.salience_pixel.is_some() != (env.salience == Salience::Low) {
            return Err(malformed("salience pixel does not match the environment".into()));
        }
        let path: PathBuf = dir.join(&r.image);
        let image = Image::read_png(&path)?;
        if image != render(&spec, env) {
            return Err(malformed(format!("{} does not match its scene record", path.display())));
        }
        refs.push(Referent { spec, image });
    }
    let mut game = ReferenceGame {
        id: rec.id,
        referents: refs.try_into().expect("three referents"),
        target: rec.target_index,
        condition: rec.condition,
        ground_truth: Utterance::parse(&rec.ground_truth.join(" "))?,
    };
    check_condition(&game)?;
    let expected = ground_truth_utterance(&game)?;
    if expected != game.ground_truth {
        return Err(malformed(format!("ground truth `{}` should be `{expected}`", game.ground_truth)));
    }
    game.ground_truth = expected;
    Ok(game)
}
