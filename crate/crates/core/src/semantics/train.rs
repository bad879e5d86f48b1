use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_chw, SemanticModel, EVAL_BATCH};
use crate::nn::{bce_loss, Adam, AdamConfig, EncoderConfig, Graph};
use crate::scene::{Image, ReferenceGame};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl TrainingHyperparams {
    /// Semantic-function defaults: 30 epochs, batch 32, lr 0.01, 10% validation.
    pub fn semantic(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            validation_fraction: 0.1,
            seed,
        }
    }

    /// Literal-speaker defaults: as above with lr 0.001.
    pub fn literal_speaker(seed: u64) -> Self {
        Self {
            lr: 0.001,
            ..Self::semantic(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 0.5)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample<'a> {
    pub game_id: u64,
    pub tokens: Vec<usize>,
    pub image: &'a Image,
    pub label: f64,
}

/// The ground-truth utterance paired with each referent: label 1 for the
/// target, 0 for both distractors.
pub fn make_training_examples(game: &ReferenceGame) -> [TrainingExample<'_>; 3] {
    let tokens = game.ground_truth.ids();
    std::array::from_fn(|i| TrainingExample {
        game_id: game.id,
        tokens: tokens.clone(),
        image: &game.referents[i].image,
        label: if i == game.target { 1.0 } else { 0.0 },
    })
}

/// Splits games (not examples) into `(train, validation)`; `floor(f * n)`
/// games, chosen by a seeded shuffle, are held out.
pub fn split_validation<'a>(
    games: &[&'a ReferenceGame],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<&'a ReferenceGame>, Vec<&'a ReferenceGame>) {
    let n_val = (fraction * games.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..games.len()).collect();
    order.shuffle(rng);
    let mut val: Vec<usize> = order[..n_val].to_vec();
    let mut train: Vec<usize> = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train.iter().map(|&i| games[i]).collect(), val.iter().map(|&i| games[i]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation loss (semantic models) or exact-match accuracy (speakers).
    pub validation: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedSemantic {
    pub model: SemanticModel,
    pub selected_epoch: usize,
    pub log: Vec<EpochLog>,
    pub train_ids: Vec<u64>,
    pub validation_ids: Vec<u64>,
}

fn examples<'a>(games: &[&'a ReferenceGame]) -> Vec<TrainingExample<'a>> {
    games.iter().flat_map(|g| make_training_examples(g)).collect()
}

/// Forward pass over a batch; returns the graph, the loss node and the probabilities.
fn batch_loss(model: &SemanticModel, batch: &[&TrainingExample<'_>]) -> Result<(Graph, crate::nn::Var, Vec<f64>)> {
    let s = model.config.image_side;
    let mut g = Graph::new();
    let p = g.bind(&model.params);
    let images: Vec<&Image> = batch.iter().map(|e| e.image).collect();
    let x = g.input(&[batch.len(), 3, s, s], batch_chw(&images))?;
    let f = model.image_encoder().forward(&mut g, &p, x)?;
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let u = model.utterance_encoder().forward(&mut g, &p, &seqs)?;
    let logits = g.row_dot(f, u)?;
    let probs = g.sigmoid(logits);
    let labels: Vec<f64> = batch.iter().map(|e| e.label).collect();
    let loss = g.bce(probs, &labels)?;
    let pv = g.value(probs).to_vec();
    Ok((g, loss, pv))
}

fn mean_bce(model: &SemanticModel, data: &[TrainingExample<'_>]) -> Result<f64> {
    let mut total = 0.0;
    let refs: Vec<&TrainingExample<'_>> = data.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let (_, _, probs) = batch_loss(model, chunk)?;
        total += probs.iter().zip(chunk).map(|(&p, e)| bce_loss(p, e.label)).sum::<f64>();
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains one semantic function with BCE on shuffled minibatches and returns
/// the epoch snapshot with the lowest validation loss (earliest on ties).
pub fn train_semantic_function(
    games: &[&ReferenceGame],
    config: &EncoderConfig,
    hyper: &TrainingHyperparams,
) -> Result<TrainedSemantic> {
    hyper.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let (train_games, val_games) = split_validation(games, hyper.validation_fraction, &mut rng);
    if train_games.is_empty() || val_games.is_empty() {
        return Err(Error::Config(format!(
            "{} games are too few for a {} validation split",
            games.len(),
            hyper.validation_fraction
        )));
    }
    let train = examples(&train_games);
    let val = examples(&val_games);

    let mut model = SemanticModel::new(config.clone(), hyper.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut best: Option<(f64, usize, crate::nn::ParameterSet)> = None;
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<&TrainingExample<'_>> = idx.iter().map(|&i| &train[i]).collect();
            let (g, loss, _) = batch_loss(&model, &batch)?;
            let l = g.value(loss)[0];
            if !l.is_finite() {
                return Err(Error::Diverged {
                    what: "semantic function".into(),
                    epoch,
                    batch: b,
                    loss: l,
                });
            }
            sum += l * batch.len() as f64;
            g.backward(loss, &mut model.params)?;
            adam.step(&mut model.params)?;
        }
        let val_loss = mean_bce(&model, &val)?;
        log.push(EpochLog {
            epoch,
            train_loss: sum / train.len() as f64,
            validation: val_loss,
        });
        if best.as_ref().is_none_or(|(v, _, _)| val_loss < *v) {
            best = Some((val_loss, epoch, model.params.clone()));
        }
    }
    let (val_loss, selected_epoch, params) = best.expect("at least one epoch");
    model.params = params;
    model.params.clear_grads();
    model.validation_loss = val_loss;
    Ok(TrainedSemantic {
        model,
        selected_epoch,
        log,
        train_ids: train_games.iter().map(|g| g.id).collect(),
        validation_ids: val_games.iter().map(|g| g.id).collect(),
    })
}

/// Writes `epoch,train_loss,<metric>` rows.
pub fn write_training_log(path: &Path, metric: &str, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::format(path, e);
    w.write_record(["epoch", "train_loss", metric]).map_err(io)?;
    for row in log {
        w.write_record([row.epoch.to_string(), format!("{:e}", row.train_loss), format!("{:e}", row.validation)])
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e))?;
    crate::util::write_atomic(path, &bytes).map_err(|e| Error::io(path, e))
}
