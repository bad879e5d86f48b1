//! The evaluation listener, the RSA speaker and the literal speaker.

mod literal;
mod rsa;

pub use literal::{
    train_literal_speaker, LiteralSpeaker, SpeakerExample, TrainedLiteral, BOS, EOS, DECODER_VOCAB, MAX_DECODE};
pub use rsa::{RsaSpeaker, DEFAULT_LAMBDA};

use crate::scene::ReferenceGame;
use crate::semantics::Semantics;
use crate::Result;

/// Produces a token sequence for the target of a game.
pub trait Speaker: Sync {
    fn speak(&self, game: &ReferenceGame) -> Result<Vec<usize>>;

    /// Utterances for many games; implementations may batch.
    fn speak_all(&self, games: &[&ReferenceGame]) -> Result<Vec<Vec<usize>>> {
        games.iter().map(|g| self.speak(g)).collect()
    }
}

/// Always says the game's ground-truth utterance.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthSpeaker;

impl Speaker for GroundTruthSpeaker {
    fn speak(&self, game: &ReferenceGame) -> Result<Vec<usize>> {
        Ok(game.ground_truth.ids())
    }
}

/// Probabilities proportional to `exp(value)`.
pub fn listener_distribution(values: [f64; 3]) -> [f64; 3] {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = values.map(|v| (v - m).exp());
    let z: f64 = e.iter().sum();
    e.map(|x| x / z)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax3(p: [f64; 3]) -> usize {
    let mut best = 0;
    for k in 1..3 {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Literal listener over a semantic function.
#[derive(Clone, Debug)]
pub struct EvalListener<S> {
    pub semantics: S,
}

impl<S: Semantics> EvalListener<S> {
    pub fn new(semantics: S) -> Self {
        Self { semantics }
    }

    pub fn distribution(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        Ok(listener_distribution(self.semantics.values(game, tokens)?))
    }

    /// Deterministic choice: argmax of the distribution.
    pub fn choose(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<usize> {
        Ok(argmax3(self.distribution(game, tokens)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_closed_forms() {
        let p = listener_distribution([0.3, 0.3, 0.3]);
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let e = std::f64::consts::E;
        let p = listener_distribution([1.0, 0.0, 0.0]);
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p[0] - 0.5761).abs() < 1e-4 && (p[1] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn argmax_ties_go_to_the_lowest_index() {
        assert_eq!(argmax3([0.6, 0.2, 0.2]), 0);
        assert_eq!(argmax3([0.4, 0.4, 0.2]), 0);
        assert_eq!(argmax3([0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax3([0.1, 0.2, 0.7]), 2);
    }
}
