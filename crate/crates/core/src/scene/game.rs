//! Reference games: three referents, a target and a context condition.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{place, render, Distribution, EnvironmentConfig, Image, SceneSpec};
use super::vocab::{Color, Shape, Utterance, Word};
use super::SceneError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextCondition {
    ColorNeeded,
    ShapeNeeded,
    BothNeeded,
    EitherSufficient,
}

impl ContextCondition {
    pub const ALL: [ContextCondition; 4] = [
        ContextCondition::ColorNeeded,
        ContextCondition::ShapeNeeded,
        ContextCondition::BothNeeded,
        ContextCondition::EitherSufficient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextCondition::ColorNeeded => "color-needed",
            ContextCondition::ShapeNeeded => "shape-needed",
            ContextCondition::BothNeeded => "both-needed",
            ContextCondition::EitherSufficient => "either-sufficient",
        }
    }

    /// Round-robin assignment by game id.
    pub fn for_game(id: u64) -> Self {
        Self::ALL[(id % 4) as usize]
    }
}

impl fmt::Display for ContextCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Referent {
    pub spec: SceneSpec,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGame {
    pub id: u64,
    pub referents: [Referent; 3],
    pub target: usize,
    pub condition: ContextCondition,
    pub ground_truth: Utterance,
}

impl ReferenceGame {
    pub fn features(&self) -> [(Color, Shape); 3] {
        self.referents.each_ref().map(|r| (r.spec.color, r.spec.shape))
    }

    pub fn target_spec(&self) -> &SceneSpec {
        &self.referents[self.target].spec
    }

    /// Indices of the referents an utterance is literally true of.
    pub fn extension(&self, u: &Utterance) -> Vec<usize> {
        self.features()
            .iter()
            .enumerate()
            .filter(|(_, (c, s))| u.is_true_of(*c, *s))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn identifies_target(&self, u: &Utterance) -> bool {
        self.extension(u) == [self.target]
    }
}

/// Independent per-game stream: any game can be regenerated from
/// `(seed, id)` alone.
pub fn game_rng(seed: u64, id: u64) -> ChaCha8Rng {
    use crate::util::splitmix;
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(id)))
}

fn others<T: Copy + PartialEq>(all: &[T], except: T) -> Vec<T> {
    all.iter().copied().filter(|&x| x != except).collect()
}

fn target_color<R: Rng + ?Sized>(rng: &mut R, env: &EnvironmentConfig, shape: Shape) -> Color {
    match env.distribution {
        Distribution::Typicality {
            shape: typical_shape,
            color,
            rate,
        } if shape == typical_shape => {
            if rng.random_bool(rate) {
                color
            } else {
                *others(&Color::ALL, color).choose(rng).expect("five other colors")
            }
        }
        _ => *Color::ALL.choose(rng).expect("six colors"),
    }
}

fn pick_two<T: Copy, R: Rng + ?Sized>(rng: &mut R, pool: Vec<T>) -> (T, T) {
    let picked: Vec<T> = pool.choose_multiple(rng, 2).copied().collect();
    (picked[0], picked[1])
}

/// Color/shape triples for one game, target first.
fn features<R: Rng + ?Sized>(
    rng: &mut R,
    condition: ContextCondition,
    env: &EnvironmentConfig,
) -> [(Color, Shape); 3] {
    let shape = *Shape::ALL.choose(rng).expect("four shapes");
    let color = target_color(rng, env, shape);
    match condition {
        ContextCondition::ShapeNeeded => {
            let (s1, s2) = pick_two(rng, others(&Shape::ALL, shape));
            [(color, shape), (color, s1), (color, s2)]
        }
        ContextCondition::ColorNeeded => {
            let (c1, c2) = pick_two(rng, others(&Color::ALL, color));
            [(color, shape), (c1, shape), (c2, shape)]
        }
        ContextCondition::BothNeeded => {
            let s1 = *others(&Shape::ALL, shape).choose(rng).expect("three shapes");
            let c2 = *others(&Color::ALL, color).choose(rng).expect("five colors");
            [(color, shape), (color, s1), (c2, shape)]
        }
        ContextCondition::EitherSufficient => {
            let colors = others(&Color::ALL, color);
            let shapes = others(&Shape::ALL, shape);
            let d1 = (*colors.choose(rng).expect("colors"), *shapes.choose(rng).expect("shapes"));
            let d2 = loop {
                let d = (*colors.choose(rng).expect("colors"), *shapes.choose(rng).expect("shapes"));
                if d != d1 {
                    break d;
                }
            };
            [(color, shape), d1, d2]
        }
    }
}

/// Draws a game under `condition`; the target position is uniform over the
/// three slots and distractors keep their drawn order.
pub fn sample_game<R: Rng + ?Sized>(
    rng: &mut R,
    id: u64,
    condition: ContextCondition,
    env: &EnvironmentConfig,
) -> Result<ReferenceGame, SceneError> {
    let feats = features(rng, condition, env);
    let target = rng.random_range(0..3);
    let slots: [usize; 3] = match target {
        0 => [0, 1, 2],
        1 => [1, 0, 2],
        _ => [1, 2, 0],
    };
    let mut refs = Vec::with_capacity(3);
    for &f in &slots {
        let (color, shape) = feats[f];
        let spec = place(rng, env, color, shape)?;
        let image = render(&spec, env);
        refs.push(Referent { spec, image });
    }
    let referents: [Referent; 3] = refs.try_into().expect("three referents");
    let mut game = ReferenceGame {
        id,
        referents,
        target,
        condition,
        ground_truth: Utterance::bare(Word::Noun)?,
    };
    game.ground_truth = ground_truth_utterance(&game)?;
    Ok(game)
}

/// Game `id` of the dataset seeded by `env.seed`.
pub fn generate_game(env: &EnvironmentConfig, id: u64) -> Result<ReferenceGame, SceneError> {
    let mut rng = game_rng(env.seed, id);
    sample_game(&mut rng, id, ContextCondition::for_game(id), env)
}

/// Checks the structural constraints of the game's condition.
pub fn check_condition(game: &ReferenceGame) -> Result<(), SceneError> {
    let f = game.features();
    let t = f[game.target];
    let ds: Vec<(Color, Shape)> = (0..3).filter(|&i| i != game.target).map(|i| f[i]).collect();
    let distinct = f[0] != f[1] && f[0] != f[2] && f[1] != f[2];
    let ok = distinct
        && match game.condition {
            ContextCondition::ShapeNeeded => ds.iter().all(|d| d.0 == t.0) && ds[0].1 != ds[1].1,
            ContextCondition::ColorNeeded => ds.iter().all(|d| d.1 == t.1) && ds[0].0 != ds[1].0,
            ContextCondition::BothNeeded => {
                let color_mate = ds.iter().filter(|d| d.0 == t.0 && d.1 != t.1).count();
                let shape_mate = ds.iter().filter(|d| d.1 == t.1 && d.0 != t.0).count();
                color_mate == 1 && shape_mate == 1
            }
            ContextCondition::EitherSufficient => ds.iter().all(|d| d.0 != t.0 && d.1 != t.1),
        };
    if ok {
        Ok(())
    } else {
        Err(SceneError::MalformedGame {
            id: game.id,
            reason: format!("referents {f:?} violate {}", game.condition),
        })
    }
}

/// The most concise uniquely identifying utterance for the game's condition.
pub fn ground_truth_utterance(game: &ReferenceGame) -> Result<Utterance, SceneError> {
    check_condition(game)?;
    let (color, shape) = game.features()[game.target];
    let u = match game.condition {
        ContextCondition::ShapeNeeded | ContextCondition::EitherSufficient => Utterance::bare(Word::Shape(shape))?,
        ContextCondition::ColorNeeded => Utterance::modified(color, Word::Noun)?,
        ContextCondition::BothNeeded => Utterance::modified(color, Word::Shape(shape))?,
    };
    debug_assert!(game.identifies_target(&u));
    Ok(u)
}
