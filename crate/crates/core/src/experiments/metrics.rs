use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::EvalListener;
use crate::scene::{Color, ContextCondition, ReferenceGame, Shape, Word};
use crate::semantics::{Semantics, TruthTable};
use crate::{Error, Result};

/// An exact rate `hits / total`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub hits: usize,
    pub total: usize,
}

impl Fraction {
    pub fn value(self) -> f64 {
        self.hits as f64 / self.total as f64
    }
}

pub fn has_color_word(tokens: &[usize]) -> bool {
    tokens.iter().any(|&t| Word::from_id(t).is_some_and(|w| w.is_color()))
}

fn check_lengths(games: &[&ReferenceGame], utterances: &[Vec<usize>]) -> Result<()> {
    if games.is_empty() {
        return Err(Error::Config("no games to evaluate".into()));
    }
    if games.len() != utterances.len() {
        return Err(Error::Config(format!(
            "{} games but {} utterances",
            games.len(),
            utterances.len()
        )));
    }
    Ok(())
}

/// Fraction of games where the listener's choice for the speaker's
/// utterance is the target.
pub fn communication_accuracy<S: Semantics>(
    listener: &EvalListener<S>,
    games: &[&ReferenceGame],
    utterances: &[Vec<usize>],
) -> Result<Fraction> {
    check_lengths(games, utterances)?;
    let hits = games
        .par_iter()
        .zip(utterances)
        .map(|(g, u)| Ok(usize::from(listener.choose(g, u)? == g.target)))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(Fraction {
        hits,
        total: games.len(),
    })
}

/// Fraction of ShapeNeeded games whose utterance mentions a color.
pub fn overmodification_rate(games: &[&ReferenceGame], utterances: &[Vec<usize>]) -> Result<Fraction> {
    check_lengths(games, utterances)?;
    if let Some(g) = games.iter().find(|g| g.condition != ContextCondition::ShapeNeeded) {
        return Err(Error::Config(format!(
            "overmodification is defined on shape-needed games; game {} is {}",
            g.id, g.condition
        )));
    }
    Ok(Fraction {
        hits: utterances.iter().filter(|u| has_color_word(u)).count(),
        total: games.len(),
    })
}

/// Probe utterance for a content word: the bare shape word, or `[color, "shape"]`.
pub fn probe_utterance(feature: Word) -> Result<Vec<usize>> {
    match feature {
        Word::Shape(_) => Ok(vec![feature.id()]),
        Word::Color(_) => Ok(vec![feature.id(), Word::Noun.id()]),
        Word::Noun => Err(Error::Config("`shape` is not a feature value".into())),
    }
}

/// Mean `|L(probe, r) - truth(feature, r)|` over every referent of `games`.
/// Returns the mean and the number of referents.
pub fn feature_uncertainty<S: Semantics>(sem: &S, games: &[&ReferenceGame], feature: Word) -> Result<(f64, usize)> {
    let probe = probe_utterance(feature)?;
    if games.is_empty() {
        return Err(Error::Config("no games to evaluate".into()));
    }
    let per_game = games
        .par_iter()
        .map(|g| {
            let v = sem.values(g, &probe)?;
            Ok(g.features()
                .iter()
                .zip(v)
                .map(|(&(c, s), p)| {
                    let truth = if feature.applies(c, s) { 1.0 } else { 0.0 };
                    (p - truth).abs()
                })
                .sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = 3 * games.len();
    Ok((per_game.iter().sum::<f64>() / n as f64, n))
}

/// One color cell of an applicability profile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub color: Color,
    /// `None` when no referent of this shape and color was seen.
    pub mean: Option<f64>,
    pub count: usize,
}

/// Mean `L(shape word, r)` over referents of `shape`, grouped by color.
pub fn applicability_profile<S: Semantics>(sem: &S, shape: Shape, games: &[&ReferenceGame]) -> Result<Vec<Cell>> {
    let probe = vec![Word::Shape(shape).id()];
    let per_game = games
        .par_iter()
        .map(|g| {
            let v = sem.values(g, &probe)?;
            let mut out = Vec::new();
            for (&(c, s), p) in g.features().iter().zip(v) {
                if s == shape {
                    out.push((c, p));
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums = [0.0; 6];
    let mut counts = [0usize; 6];
    for (c, p) in per_game.into_iter().flatten() {
        sums[c.index()] += p;
        counts[c.index()] += 1;
    }
    Ok(Color::ALL
        .iter()
        .map(|&color| {
            let i = color.index();
            Cell {
                color,
                mean: (counts[i] > 0).then(|| sums[i] / counts[i] as f64),
                count: counts[i],
            }
        })
        .collect())
}

/// Typical-color cell minus the mean of the present non-typical cells.
pub fn applicability_gap(profile: &[Cell], typical: Color) -> Option<f64> {
    let typ = profile.iter().find(|c| c.color == typical)?.mean?;
    let rest: Vec<f64> = profile
        .iter()
        .filter(|c| c.color != typical)
        .filter_map(|c| c.mean)
        .collect();
    if rest.is_empty() {
        return None;
    }
    Some(typ - rest.iter().sum::<f64>() / rest.len() as f64)
}

/// Perfect listener used as a reference in tests and sanity rows.
pub fn truth_listener() -> EvalListener<TruthTable> {
    EvalListener::new(TruthTable)
}

/// `(mean, 1.96 * sd / sqrt(k))` with the sample standard deviation;
/// the half-width is `None` for fewer than two values.
pub fn mean_ci(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let k = values.len();
    if k == 0 {
        return (None, None);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (Some(mean), Some(1.96 * var.sqrt() / (k as f64).sqrt()))
}
