//! Parameterised building blocks: the convolutional image encoder, the GRU
//! cell and recurrent utterance encoder, linear maps and embeddings.
//!
//! Every block owns a name prefix; its parameters live in a shared
//! [`ParameterSet`] under `<prefix>.<name>`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Bound, Graph, Var};
use super::{NnError, ParameterSet, Tensor};

/// Architecture of the image and utterance encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image_side: usize,
    /// Output channels of each conv block (3x3 conv, ReLU, 2x2 max-pool).
    pub channels: Vec<usize>,
    /// Embedding dimension `d` shared by image and utterance encoders.
    pub embed_dim: usize,
    pub token_dim: usize,
    /// How the final conv map is reduced before the projection to `d`.
    #[serde(default)]
    pub head: Head,
}

/// Reduction of the last conv feature map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    /// Flatten `C x s x s` and project; position-specific.
    Flatten,
    /// Per-channel max over positions, then project; translation-invariant.
    #[default]
    GlobalMax,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_side: 64,
            channels: vec![16, 32, 64],
            embed_dim: 64,
            token_dim: 32,
            head: Head::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.embed_dim == 0 || self.token_dim == 0 {
            return Err(NnError::Config("embedding dimensions must be >= 1".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(NnError::Config("conv channel schedule must be non-empty and positive".into()));
        }
        let div = 1usize << self.channels.len();
        if self.image_side == 0 || !self.image_side.is_multiple_of(div) {
            return Err(NnError::Config(format!(
                "image side {} not divisible by 2^{}",
                self.image_side,
                self.channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial side after all pooling stages.
    pub fn pooled_side(&self) -> usize {
        self.image_side >> self.channels.len()
    }

    /// Input width of the projection.
    pub fn flat_dim(&self) -> usize {
        let c = self.channels.last().copied().unwrap_or(0);
        match self.head {
            Head::Flatten => c * self.pooled_side() * self.pooled_side(),
            Head::GlobalMax => c,
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// He-uniform bound for weights feeding a ReLU. With the smaller `bound`,
/// Adam at lr 0.01 kills every conv unit within a handful of steps.
fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<(), NnError> {
        params.insert(
            join(&self.prefix, "weight"),
            Tensor::uniform(&[self.in_dim, self.out_dim], bound(self.in_dim), rng),
        )?;
        params.insert(join(&self.prefix, "bias"), Tensor::zeros(&[self.out_dim]))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, NnError> {
        let w = p.get(&join(&self.prefix, "weight"))?;
        let b = p.get(&join(&self.prefix, "bias"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub prefix: String,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(prefix: impl Into<String>, vocab: usize, dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            vocab,
            dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<(), NnError> {
        // Treated as a one-hot input times a weight matrix, so fan-in is the vocabulary.
        params.insert(
            join(&self.prefix, "table"),
            Tensor::uniform(&[self.vocab, self.dim], bound(self.vocab), rng),
        )
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, ids: &[usize]) -> Result<Var, NnError> {
        let t = p.get(&join(&self.prefix, "table"))?;
        g.embedding(t, ids)
    }
}

/// Gated recurrent unit cell; gate columns are ordered reset, update, candidate.
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input_dim: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input_dim,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<(), NnError> {
        let h3 = 3 * self.hidden;
        params.insert(
            join(&self.prefix, "w_ih"),
            Tensor::uniform(&[self.input_dim, h3], bound(self.input_dim), rng),
        )?;
        params.insert(
            join(&self.prefix, "w_hh"),
            Tensor::uniform(&[self.hidden, h3], bound(self.hidden), rng),
        )?;
        params.insert(join(&self.prefix, "b_ih"), Tensor::zeros(&[h3]))?;
        params.insert(join(&self.prefix, "b_hh"), Tensor::zeros(&[h3]))
    }

    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h: Var) -> Result<Var, NnError> {
        let hd = self.hidden;
        let gx = g.matmul(x, p.get(&join(&self.prefix, "w_ih"))?)?;
        let gx = g.add_bias(gx, p.get(&join(&self.prefix, "b_ih"))?)?;
        let gh = g.matmul(h, p.get(&join(&self.prefix, "w_hh"))?)?;
        let gh = g.add_bias(gh, p.get(&join(&self.prefix, "b_hh"))?)?;

        let xr = g.slice_cols(gx, 0, hd)?;
        let hr = g.slice_cols(gh, 0, hd)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);

        let xz = g.slice_cols(gx, hd, hd)?;
        let hz = g.slice_cols(gh, hd, hd)?;
        let z = g.add(xz, hz)?;
        let z = g.sigmoid(z);

        let xn = g.slice_cols(gx, 2 * hd, hd)?;
        let hn = g.slice_cols(gh, 2 * hd, hd)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(xn, rn)?;
        let n = g.tanh(n);

        let keep = g.one_minus(z);
        let a = g.mul(keep, n)?;
        let b = g.mul(z, h)?;
        g.add(a, b)
    }
}

/// Convolutional image encoder: conv blocks, flatten, linear projection to `d`.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub prefix: String,
    pub config: EncoderConfig,
}

impl ImageEncoder {
    pub fn new(prefix: impl Into<String>, config: EncoderConfig) -> Self {
        Self {
            prefix: prefix.into(),
            config,
        }
    }

    fn proj(&self) -> Linear {
        Linear::new(join(&self.prefix, "proj"), self.config.flat_dim(), self.config.embed_dim)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<(), NnError> {
        self.config.validate()?;
        let mut cin = 3;
        for (i, &cout) in self.config.channels.iter().enumerate() {
            let fan_in = cin * 9;
            params.insert(
                join(&self.prefix, &format!("conv{i}.weight")),
                Tensor::uniform(&[cout, cin, 3, 3], relu_bound(fan_in), rng),
            )?;
            params.insert(
                join(&self.prefix, &format!("conv{i}.bias")),
                Tensor::zeros(&[cout]),
            )?;
            cin = cout;
        }
        self.proj().init(params, rng)
    }

    /// `images: [B, 3, S, S]` -> `[B, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, images: Var) -> Result<Var, NnError> {
        let s = self.config.image_side;
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(NnError::Config(format!(
                "image encoder expects [B, 3, {s}, {s}], got {shape:?}"
            )));
        }
        let bsz = shape[0];
        let mut x = images;
        for i in 0..self.config.channels.len() {
            let w = p.get(&join(&self.prefix, &format!("conv{i}.weight")))?;
            let b = p.get(&join(&self.prefix, &format!("conv{i}.bias")))?;
            x = g.conv_relu_pool(x, w, b)?;
        }
        let flat = match self.config.head {
            Head::Flatten => g.reshape(x, &[bsz, self.config.flat_dim()])?,
            Head::GlobalMax => g.global_max_pool(x)?,
        };
        self.proj().forward(g, p, flat)
    }

    /// Embeds one `[H, W, 3]` image tensor with values in `[0, 1]`.
    pub fn encode(&self, params: &ParameterSet, image: &Tensor) -> Result<Tensor, NnError> {
        let s = self.config.image_side;
        if image.shape() != [s, s, 3] {
            return Err(NnError::Config(format!(
                "image encoder expects [{s}, {s}, 3], got {:?}",
                image.shape()
            )));
        }
        let mut g = Graph::new();
        let p = g.bind(params);
        let x = g.input(&[1, 3, s, s], hwc_to_chw(image.data(), s))?;
        let y = self.forward(&mut g, &p, x)?;
        let d = self.config.embed_dim;
        Tensor::new(&[d], g.value(y).to_vec())
    }
}

/// Converts interleaved `[H, W, 3]` pixels to planar `[3, H, W]`.
pub fn hwc_to_chw(data: &[f64], side: usize) -> Vec<f64> {
    let hw = side * side;
    let mut out = vec![0.0; 3 * hw];
    for (i, px) in data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * hw + i] = px[c];
        }
    }
    out
}

/// Unidirectional GRU over token embeddings, returning the final hidden state.
#[derive(Clone, Debug)]
pub struct UtteranceEncoder {
    pub prefix: String,
    pub vocab: usize,
    pub config: EncoderConfig,
}

impl UtteranceEncoder {
    pub fn new(prefix: impl Into<String>, vocab: usize, config: EncoderConfig) -> Self {
        Self {
            prefix: prefix.into(),
            vocab,
            config,
        }
    }

    fn embedding(&self) -> Embedding {
        Embedding::new(join(&self.prefix, "embed"), self.vocab, self.config.token_dim)
    }

    fn cell(&self) -> GruCell {
        GruCell::new(join(&self.prefix, "gru"), self.config.token_dim, self.config.embed_dim)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterSet, rng: &mut R) -> Result<(), NnError> {
        self.embedding().init(params, rng)?;
        self.cell().init(params, rng)
    }

    /// Encodes a batch of token sequences of possibly different lengths,
    /// starting from a zero state. Empty sequences encode to the zero vector.
    pub fn forward(&self, g: &mut Graph, p: &Bound, seqs: &[&[usize]]) -> Result<Var, NnError> {
        for s in seqs {
            if let Some(&id) = s.iter().find(|&&t| t >= self.vocab) {
                return Err(NnError::Token {
                    id,
                    vocab: self.vocab,
                });
            }
        }
        let bsz = seqs.len();
        let hd = self.config.embed_dim;
        let mut h = g.input(&[bsz, hd], vec![0.0; bsz * hd])?;
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let (emb, cell) = (self.embedding(), self.cell());
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = emb.forward(g, p, &ids)?;
            let next = cell.step(g, p, x, h)?;
            let active: Vec<bool> = seqs.iter().map(|s| t < s.len()).collect();
            h = if active.iter().all(|&a| a) {
                next
            } else {
                g.row_select(&active, next, h)?
            };
        }
        Ok(h)
    }

    pub fn encode(&self, params: &ParameterSet, tokens: &[usize]) -> Result<Tensor, NnError> {
        let mut g = Graph::new();
        let p = g.bind(params);
        let h = self.forward(&mut g, &p, &[tokens])?;
        Tensor::new(&[self.config.embed_dim], g.value(h).to_vec())
    }
}
