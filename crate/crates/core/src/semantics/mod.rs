//! The learned semantic function `L(u, r) = sigmoid(f_L(r) . g(u))`, its
//! training loop, and the semantics interfaces agents consume.

mod interface;
mod train;

pub use interface::{mean_values, Constant, Ensemble, Precomputed, Semantics, TruthTable};
pub use train::{
    make_training_examples, split_validation, train_semantic_function, write_training_log, EpochLog,
    TrainedSemantic, TrainingExample, TrainingHyperparams,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Checkpoint, EncoderConfig, Graph, ImageEncoder, ParameterSet, UtteranceEncoder};
use crate::scene::{Image, VOCAB_SIZE};
use crate::{Error, Result};

const IMAGE: &str = "image";
const UTTERANCE: &str = "utterance";
const EVAL_BATCH: usize = 64;

/// Planar `[B, 3, S, S]` batch from RGB images.
pub fn batch_chw(images: &[&Image]) -> Vec<f64> {
    let Some(first) = images.first() else {
        return Vec::new();
    };
    let n = 3 * first.side * first.side;
    let mut out = vec![0.0; images.len() * n];
    for (img, chunk) in images.iter().zip(out.chunks_exact_mut(n)) {
        img.write_chw(chunk);
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug)]
pub struct SemanticModel {
    pub config: EncoderConfig,
    pub params: ParameterSet,
    pub seed: u64,
    /// Validation loss of the selected snapshot (NaN before training).
    pub validation_loss: f64,
}

impl SemanticModel {
    /// Freshly initialized model.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        ImageEncoder::new(IMAGE, config.clone()).init(&mut params, &mut rng)?;
        UtteranceEncoder::new(UTTERANCE, VOCAB_SIZE, config.clone()).init(&mut params, &mut rng)?;
        Ok(Self {
            config,
            params,
            seed,
            validation_loss: f64::NAN,
        })
    }

    pub fn image_encoder(&self) -> ImageEncoder {
        ImageEncoder::new(IMAGE, self.config.clone())
    }

    pub fn utterance_encoder(&self) -> UtteranceEncoder {
        UtteranceEncoder::new(UTTERANCE, VOCAB_SIZE, self.config.clone())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.side != self.config.image_side {
            return Err(Error::Config(format!(
                "image side {} does not match encoder side {}",
                image.side, self.config.image_side
            )));
        }
        Ok(())
    }

    /// `f_L` for a list of images, evaluated in batches.
    pub fn image_embeddings(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let enc = self.image_encoder();
        let s = self.config.image_side;
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            for img in chunk {
                self.check_image(img)?;
            }
            let mut g = Graph::new();
            let p = g.bind(&self.params);
            let x = g.input(&[chunk.len(), 3, s, s], batch_chw(chunk))?;
            let y = enc.forward(&mut g, &p, x)?;
            out.extend(g.value(y).chunks_exact(d).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// `g` for one token sequence.
    pub fn utterance_embedding(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.utterance_encoder().encode(&self.params, tokens)?.into_data())
    }

    /// `sigmoid(f_L(r) . g(u))`.
    pub fn value(&self, tokens: &[usize], image: &Image) -> Result<f64> {
        self.check_image(image)?;
        let f = self.image_encoder().encode(&self.params, &image.to_tensor())?;
        let g = self.utterance_embedding(tokens)?;
        Ok(crate::nn::sigmoid(dot(f.data(), &g)))
    }

    pub fn to_checkpoint(&self, role: &str) -> Result<Checkpoint> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Checkpoint::new(self.params.clone())
            .with("role", role)
            .with("kind", "semantic")
            .with("seed", self.seed)
            .with("config", config)
            .with("validation_loss", format!("{:e}", self.validation_loss)))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind")? != "semantic" {
            return Err(Error::Config(format!("checkpoint holds a `{}`, not a semantic model", ck.meta("kind")?)));
        }
        let config: EncoderConfig =
            serde_json::from_str(ck.meta("config")?).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let parse = |k: &str| -> Result<String> { Ok(ck.meta(k)?.to_string()) };
        let seed = parse("seed")?.parse().map_err(|_| Error::Config("checkpoint seed".into()))?;
        let validation_loss = parse("validation_loss")?
            .parse()
            .map_err(|_| Error::Config("checkpoint validation_loss".into()))?;
        let reference = Self::new(config.clone(), seed)?;
        for (name, t) in reference.params.iter() {
            let got = ck.params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Config(format!("checkpoint parameter `{name}` has shape {:?}", got.shape())));
            }
        }
        if ck.params.len() != reference.params.len() {
            return Err(Error::Config("checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            config,
            params: ck.params.clone(),
            seed,
            validation_loss,
        })
    }
}
