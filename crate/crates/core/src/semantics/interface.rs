use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rayon::prelude::*;

use super::{dot, SemanticModel};
use crate::nn::sigmoid;
use crate::scene::{Image, ReferenceGame, Word};
use crate::{Error, Result};

/// A (literal) semantic function evaluated on the referents of a game.
pub trait Semantics: Sync {
    /// `L(u, r_k)` for the three referents, in presentation order.
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]>;
}

/// Truth-conditional semantics: 1 when every word applies, else 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct TruthTable;

impl TruthTable {
    pub fn truth(tokens: &[usize], color: crate::scene::Color, shape: crate::scene::Shape) -> bool {
        tokens
            .iter()
            .all(|&t| Word::from_id(t).is_some_and(|w| w.applies(color, shape)))
    }
}

impl Semantics for TruthTable {
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        Ok(game.features().map(|(c, s)| if Self::truth(tokens, c, s) { 1.0 } else { 0.0 }))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl Semantics for Constant {
    fn values(&self, _: &ReferenceGame, _: &[usize]) -> Result<[f64; 3]> {
        Ok([self.0; 3])
    }
}

impl Semantics for SemanticModel {
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        let images: Vec<&Image> = game.referents.iter().map(|r| &r.image).collect();
        let f = self.image_embeddings(&images)?;
        let g = self.utterance_embedding(tokens)?;
        Ok(std::array::from_fn(|i| sigmoid(dot(&f[i], &g))))
    }
}

fn pixel_hash(img: &Image) -> u64 {
    let mut h = DefaultHasher::new();
    img.pixels.hash(&mut h);
    h.finish()
}

/// A trained model with image embeddings cached for a fixed set of games and
/// utterance embeddings cached for the utterance space. Anything outside the
/// cache is computed on demand.
#[derive(Clone, Debug)]
pub struct Precomputed {
    pub model: SemanticModel,
    images: HashMap<(u64, usize), (u64, Vec<f64>)>,
    utterances: HashMap<Vec<usize>, Vec<f64>>,
}

impl Precomputed {
    pub fn new(model: SemanticModel, games: &[&ReferenceGame]) -> Result<Self> {
        let refs: Vec<(u64, usize, &Image)> = games
            .iter()
            .flat_map(|g| g.referents.iter().enumerate().map(move |(i, r)| (g.id, i, &r.image)))
            .collect();
        let chunks: Vec<Vec<((u64, usize), (u64, Vec<f64>))>> = refs
            .par_chunks(256)
            .map(|chunk| -> Result<_> {
                let imgs: Vec<&Image> = chunk.iter().map(|c| c.2).collect();
                let emb = model.image_embeddings(&imgs)?;
                Ok(chunk
                    .iter()
                    .zip(emb)
                    .map(|(&(id, i, img), e)| ((id, i), (pixel_hash(img), e)))
                    .collect())
            })
            .collect::<Result<_>>()?;
        let images = chunks.into_iter().flatten().collect();
        let mut utterances = HashMap::new();
        for u in crate::scene::utterance_space() {
            let ids = u.ids();
            let e = model.utterance_embedding(&ids)?;
            utterances.insert(ids, e);
        }
        Ok(Self {
            model,
            images,
            utterances,
        })
    }

    pub fn image_embedding(&self, game: &ReferenceGame, referent: usize) -> Result<Vec<f64>> {
        let img = &game.referents[referent].image;
        match self.images.get(&(game.id, referent)) {
            Some((h, e)) if *h == pixel_hash(img) => Ok(e.clone()),
            _ => Ok(self.model.image_embeddings(&[img])?.remove(0)),
        }
    }

    pub fn utterance_embedding(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        match self.utterances.get(tokens) {
            Some(e) => Ok(e.clone()),
            None => self.model.utterance_embedding(tokens),
        }
    }
}

impl Semantics for Precomputed {
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        let g = self.utterance_embedding(tokens)?;
        let mut out = [0.0; 3];
        for (i, v) in out.iter_mut().enumerate() {
            *v = sigmoid(dot(&self.image_embedding(game, i)?, &g));
        }
        Ok(out)
    }
}

/// Mean with a canonical summation order, so permuting inputs cannot change
/// the result.
pub fn mean_values(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Arithmetic mean of member semantic values.
#[derive(Clone, Debug)]
pub struct Ensemble<S> {
    members: Vec<S>,
}

impl<S> Ensemble<S> {
    pub fn new(members: Vec<S>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("an ensemble needs at least one member".into()));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[S] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

impl Ensemble<SemanticModel> {
    /// Mean of member `L(u, r)` on a single image.
    pub fn value(&self, tokens: &[usize], image: &Image) -> Result<f64> {
        let v = self
            .members
            .iter()
            .map(|m| m.value(tokens, image))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_values(&v))
    }
}

impl<S: Semantics> Semantics for Ensemble<S> {
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        let per_member = self
            .members
            .iter()
            .map(|m| m.values(game, tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(std::array::from_fn(|k| {
            let column: Vec<f64> = per_member.iter().map(|v| v[k]).collect();
            mean_values(&column)
        }))
    }
}

impl<S: Semantics + ?Sized> Semantics for &S {
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        (**self).values(game, tokens)
    }
}

impl<S: Semantics + ?Sized> Semantics for Box<S> {
    fn values(&self, game: &ReferenceGame, tokens: &[usize]) -> Result<[f64; 3]> {
        (**self).values(game, tokens)
    }
}
