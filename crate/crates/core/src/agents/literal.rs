use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Speaker;
use crate::nn::{Adam, AdamConfig, Bound, Checkpoint, Embedding, EncoderConfig, Graph, GruCell, ImageEncoder, Linear, ParameterSet, Var};
use crate::scene::{Image, ReferenceGame, VOCAB_SIZE};
use crate::semantics::{batch_chw, split_validation, EpochLog, TrainingHyperparams};
use crate::{Error, Result};

/// Decoder input token that starts every sequence.
pub const BOS: usize = VOCAB_SIZE;
/// Decoder output token that ends a sequence. Shares its id with [`BOS`];
/// one is input-only, the other output-only.
pub const EOS: usize = VOCAB_SIZE;
/// Words plus the BOS/EOS slot.
pub const DECODER_VOCAB: usize = VOCAB_SIZE + 1;
/// Greedy decoding emits at most this many words.
pub const MAX_DECODE: usize = 3;

const CONTEXT: &str = "context";
const INIT: &str = "decoder.init";
const EMBED: &str = "decoder.embed";
const GRU: &str = "decoder.gru";
const OUT: &str = "decoder.out";
const DECODE_BATCH: usize = 64;

/// Encoder-decoder speaker conditioned on the three referents and the target index.
#[derive(Clone, Debug)]
pub struct LiteralSpeaker {
    pub config: EncoderConfig,
    pub params: ParameterSet,
    pub seed: u64,
    /// Validation exact-match accuracy of the selected snapshot (NaN before training).
    pub validation_accuracy: f64,
}

/// One teacher-forcing example: the three referent images, the target slot
/// and the words to produce.
#[derive(Clone, Debug)]
pub struct SpeakerExample<'a> {
    pub images: [&'a Image; 3],
    pub target: usize,
    pub tokens: Vec<usize>,
}

impl<'a> SpeakerExample<'a> {
    pub fn from_game(game: &'a ReferenceGame) -> Self {
        Self {
            images: std::array::from_fn(|i| &game.referents[i].image),
            target: game.target,
            tokens: game.ground_truth.ids(),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl LiteralSpeaker {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        let d = config.embed_dim;
        ImageEncoder::new(CONTEXT, config.clone()).init(&mut params, &mut rng)?;
        Linear::new(INIT, 4 * d + 3, d).init(&mut params, &mut rng)?;
        Embedding::new(EMBED, DECODER_VOCAB, config.token_dim).init(&mut params, &mut rng)?;
        GruCell::new(GRU, config.token_dim, d).init(&mut params, &mut rng)?;
        Linear::new(OUT, d, DECODER_VOCAB).init(&mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            seed,
            validation_accuracy: f64::NAN,
        })
    }

    fn check_images(&self, images: &[&Image]) -> Result<()> {
        match images.iter().find(|i| i.side != self.config.image_side) {
            Some(img) => Err(Error::Config(format!(
                "image side {} does not match encoder side {}",
                img.side, self.config.image_side
            ))),
            None => Ok(()),
        }
    }

    /// `h = [f_S(r1); f_S(r2); f_S(r3); onehot(t)]`, one row per example.
    pub fn context(&self, g: &mut Graph, p: &Bound, images: &[[&Image; 3]], targets: &[usize]) -> Result<Var> {
        let flat: Vec<&Image> = images.iter().flatten().copied().collect();
        self.check_images(&flat)?;
        let (s, d, b) = (self.config.image_side, self.config.embed_dim, images.len());
        let x = g.input(&[3 * b, 3, s, s], batch_chw(&flat))?;
        let f = ImageEncoder::new(CONTEXT, self.config.clone()).forward(g, p, x)?;
        let f = g.reshape(f, &[b, 3 * d])?;
        let mut onehot = vec![0.0; 3 * b];
        for (i, &t) in targets.iter().enumerate() {
            if t > 2 {
                return Err(Error::Config(format!("target index {t} out of range")));
            }
            onehot[3 * i + t] = 1.0;
        }
        let t = g.input(&[b, 3], onehot)?;
        Ok(g.concat_cols(&[f, t])?)
    }

    /// The context vector for one game, `3d + 3` long.
    pub fn encode(&self, images: [&Image; 3], target: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let h = self.context(&mut g, &p, &[images], &[target])?;
        Ok(g.value(h).to_vec())
    }

    /// Summed token cross-entropy under teacher forcing, divided by the batch size.
    pub fn loss(&self, g: &mut Graph, p: &Bound, batch: &[SpeakerExample<'_>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Config("empty speaker batch".into()));
        }
        let images: Vec<[&Image; 3]> = batch.iter().map(|e| e.images).collect();
        let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
        let ctx = self.context(g, p, &images, &targets)?;
        let mut h = self.initial_state(g, p, ctx, &targets)?;
        let (emb, cell, out) = self.decoder();
        let steps = batch.iter().map(|e| e.tokens.len()).max().unwrap_or(0) + 1;
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let inputs: Vec<usize> = batch
                .iter()
                .map(|e| if t == 0 { BOS } else { e.tokens.get(t - 1).copied().unwrap_or(BOS) })
                .collect();
            let want: Vec<Option<usize>> = batch
                .iter()
                .map(|e| match t.cmp(&e.tokens.len()) {
                    std::cmp::Ordering::Less => Some(e.tokens[t]),
                    std::cmp::Ordering::Equal => Some(EOS),
                    std::cmp::Ordering::Greater => None,
                })
                .collect();
            let x = emb.forward(g, p, &inputs)?;
            h = cell.step(g, p, x, h)?;
            let logits = out.forward(g, p, h)?;
            let l = g.softmax_cross_entropy(logits, &want)?;
            total = Some(match total {
                None => l,
                Some(prev) => g.add(prev, l)?,
            });
        }
        let total = total.expect("at least one decoding step");
        Ok(g.scale(total, 1.0 / batch.len() as f64))
    }

    /// Initial decoder state: a learned linear map of `[h; sum_k t_k f_S(r_k)]`.
    /// The second block is read off `h` without parameters; a linear map of
    /// `h` alone cannot gate referent encodings by the one-hot target.
    pub fn initial_state(&self, g: &mut Graph, p: &Bound, ctx: Var, targets: &[usize]) -> Result<Var> {
        let d = self.config.embed_dim;
        let b = targets.len();
        let mut selected: Option<Var> = None;
        for k in 0..3 {
            let f = g.slice_cols(ctx, k * d, d)?;
            let mask: Vec<f64> = targets
                .iter()
                .flat_map(|&t| std::iter::repeat_n(if t == k { 1.0 } else { 0.0 }, d))
                .collect();
            let m = g.input(&[b, d], mask)?;
            let part = g.mul(f, m)?;
            selected = Some(match selected {
                None => part,
                Some(acc) => g.add(acc, part)?,
            });
        }
        let z = g.concat_cols(&[ctx, selected.expect("three referents")])?;
        Ok(Linear::new(INIT, 4 * d + 3, d).forward(g, p, z)?)
    }

    fn decoder(&self) -> (Embedding, GruCell, Linear) {
        let d = self.config.embed_dim;
        (
            Embedding::new(EMBED, DECODER_VOCAB, self.config.token_dim),
            GruCell::new(GRU, self.config.token_dim, d),
            Linear::new(OUT, d, DECODER_VOCAB),
        )
    }

    /// Greedy decoding for `(images, target)` pairs; stops at EOS or after
    /// [`MAX_DECODE`] words. Output is returned verbatim, grammatical or not.
    pub fn decode(&self, images: &[[&Image; 3]], targets: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(images.len());
        let (emb, cell, lin) = self.decoder();
        for (imgs, ts) in images.chunks(DECODE_BATCH).zip(targets.chunks(DECODE_BATCH)) {
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let ctx = self.context(&mut g, &p, imgs, ts)?;
            let mut h = self.initial_state(&mut g, &p, ctx, ts)?;
            let b = imgs.len();
            let mut seqs = vec![Vec::new(); b];
            let mut done = vec![false; b];
            let mut inputs = vec![BOS; b];
            for _ in 0..MAX_DECODE {
                let x = emb.forward(&mut g, &p, &inputs)?;
                h = cell.step(&mut g, &p, x, h)?;
                let logits = lin.forward(&mut g, &p, h)?;
                let lv = g.value(logits);
                for (i, row) in lv.chunks_exact(DECODER_VOCAB).enumerate() {
                    if done[i] {
                        continue;
                    }
                    let tok = argmax(row);
                    if tok == EOS {
                        done[i] = true;
                    } else {
                        seqs[i].push(tok);
                        inputs[i] = tok;
                    }
                }
                if done.iter().all(|&x| x) {
                    break;
                }
            }
            out.extend(seqs);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, role: &str) -> Result<Checkpoint> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::new(self.params.clone())
            .with("role", role)
            .with("kind", "literal-speaker")
            .with("seed", self.seed)
            .with("config", config)
            .with("validation_accuracy", format!("{:e}", self.validation_accuracy)))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let kind = ck.meta("kind")?;
        if kind != "literal-speaker" {
            return Err(Error::Config(format!("checkpoint holds a `{kind}`, not a literal speaker")));
        }
        let config: EncoderConfig =
            serde_json::from_str(ck.meta("config")?).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let seed = ck.meta("seed")?.parse().map_err(|_| Error::Config("checkpoint seed".into()))?;
        let validation_accuracy = ck
            .meta("validation_accuracy")?
            .parse()
            .map_err(|_| Error::Config("checkpoint validation_accuracy".into()))?;
        let reference = Self::new(config.clone(), seed)?;
        if ck.params.len() != reference.params.len() {
            return Err(Error::Config("checkpoint has unexpected parameters".into()));
        }
        for (name, t) in reference.params.iter() {
            let got = ck.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!("checkpoint parameter `{name}` has shape {:?}", got.shape())));
            }
        }
        Ok(Self {
            config,
            params: ck.params.clone(),
            seed,
            validation_accuracy,
        })
    }

    fn exact_match(&self, games: &[&ReferenceGame]) -> Result<f64> {
        let said = self.speak_all(games)?;
        let hits = said.iter().zip(games).filter(|(s, g)| **s == g.ground_truth.ids()).count();
        Ok(hits as f64 / games.len().max(1) as f64)
    }
}

impl Speaker for LiteralSpeaker {
    fn speak(&self, game: &ReferenceGame) -> Result<Vec<usize>> {
        Ok(self.speak_all(&[game])?.remove(0))
    }

    fn speak_all(&self, games: &[&ReferenceGame]) -> Result<Vec<Vec<usize>>> {
        let images: Vec<[&Image; 3]> = games
            .iter()
            .map(|g| std::array::from_fn(|i| &g.referents[i].image))
            .collect();
        let targets: Vec<usize> = games.iter().map(|g| g.target).collect();
        self.decode(&images, &targets)
    }
}

#[derive(Clone, Debug)]
pub struct TrainedLiteral {
    pub speaker: LiteralSpeaker,
    pub selected_epoch: usize,
    /// `validation` holds exact-match accuracy.
    pub log: Vec<EpochLog>,
    pub train_ids: Vec<u64>,
    pub validation_ids: Vec<u64>,
}

/// Teacher-forced training on ground-truth utterances; keeps the epoch
/// snapshot with the highest validation exact-match accuracy (earliest on ties).
pub fn train_literal_speaker(
    games: &[&ReferenceGame],
    config: &EncoderConfig,
    hyper: &TrainingHyperparams,
) -> Result<TrainedLiteral> {
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
    let train: Vec<SpeakerExample<'_>> = train_games.iter().map(|g| SpeakerExample::from_game(g)).collect();

    let mut speaker = LiteralSpeaker::new(config.clone(), hyper.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.lr));
    let mut best: Option<(f64, usize, ParameterSet)> = None;
    let mut log = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, idx) in order.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<SpeakerExample<'_>> = idx.iter().map(|&i| train[i].clone()).collect();
            let mut g = Graph::new();
            let p = g.bind(&speaker.params);
            let loss = speaker.loss(&mut g, &p, &batch)?;
            let l = g.value(loss)[0];
            if !l.is_finite() {
                return Err(Error::Diverged {
                    what: "literal speaker".into(),
                    epoch,
                    batch: b,
                    loss: l,
                });
            }
            sum += l * batch.len() as f64;
            g.backward(loss, &mut speaker.params)?;
            adam.step(&mut speaker.params)?;
        }
        let acc = speaker.exact_match(&val_games)?;
        log.push(EpochLog {
            epoch,
            train_loss: sum / train.len() as f64,
            validation: acc,
        });
        if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
            best = Some((acc, epoch, speaker.params.clone()));
        }
    }
    let (acc, selected_epoch, params) = best.expect("at least one epoch");
    speaker.params = params;
    speaker.params.clear_grads();
    speaker.validation_accuracy = acc;
    Ok(TrainedLiteral {
        speaker,
        selected_epoch,
        log,
        train_ids: train_games.iter().map(|g| g.id).collect(),
        validation_ids: val_games.iter().map(|g| g.id).collect(),
    })
}
