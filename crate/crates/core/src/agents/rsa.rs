use super::{listener_distribution, Speaker};
use crate::scene::{utterance_space, ReferenceGame, Utterance};
use crate::semantics::Semantics;
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Pragmatic speaker: picks the utterance maximizing
/// `ln P_L(t | u) - lambda * |u|` under an internal literal listener.
#[derive(Clone, Debug)]
pub struct RsaSpeaker<S> {
    pub listener: S,
    pub lambda: f64,
    space: Vec<Utterance>,
}

impl<S: Semantics> RsaSpeaker<S> {
    pub fn new(listener: S, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("cost weight {lambda} must be finite and >= 0")));
        }
        Ok(Self {
            listener,
            lambda,
            space: utterance_space(),
        })
    }

    pub fn space(&self) -> &[Utterance] {
        &self.space
    }

    pub fn utility(&self, game: &ReferenceGame, u: &Utterance, target: usize) -> Result<f64> {
        let p = listener_distribution(self.listener.values(game, &u.ids())?);
        Ok(p[target].ln() - self.lambda * u.len() as f64)
    }

    /// Utilities of every utterance, in enumeration order.
    pub fn utilities(&self, game: &ReferenceGame, target: usize) -> Result<Vec<f64>> {
        self.space.iter().map(|u| self.utility(game, u, target)).collect()
    }

    /// Exhaustive argmax; the earliest utterance in enumeration order wins ties.
    pub fn speak_for(&self, game: &ReferenceGame, target: usize) -> Result<Utterance> {
        let utils = self.utilities(game, target)?;
        let mut best = 0;
        for (i, &u) in utils.iter().enumerate().skip(1) {
            if u > utils[best] {
                best = i;
            }
        }
        Ok(self.space[best].clone())
    }
}

impl<S: Semantics> Speaker for RsaSpeaker<S> {
    fn speak(&self, game: &ReferenceGame) -> Result<Vec<usize>> {
        Ok(self.speak_for(game, game.target)?.ids())
    }
}
