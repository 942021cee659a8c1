//! Text and image encoders producing `[CLS]`-prefixed feature sequences.
//!
//! The toy backend is a small trainable transformer pair: hashed word
//! embeddings for text, a linear patch projection for images, each followed by
//! self-attention layers. Any other backend plugs in through
//! [`FeatureProvider`] and is treated as frozen.

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::corruption::patch_grid_side;
use crate::datasets::Image;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Dropout, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
}

/// `L×d` features; row 0 is the `[CLS]` position.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub features: Array2<f64>,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn new(features: Array2<f64>, modality: Modality) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::invalid("token sequence needs at least the [CLS] row"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("token sequence contains non-finite features"));
        }
        Ok(Self { features, modality })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn cls(&self) -> ndarray::ArrayView1<'_, f64> {
        self.features.row(0)
    }
}

/// A pretrained (frozen) encoder pair. Implementations must return sequences
/// of width [`FeatureProvider::width`] for both modalities.
pub trait FeatureProvider: Send + Sync {
    fn width(&self) -> usize;
    fn encode_text(&self, tokens: &[String]) -> Result<TokenSequence>;
    fn encode_image(&self, image: &Image) -> Result<TokenSequence>;
}

/// Stable vocabulary bucket for a word.
pub fn token_bucket(token: &str, vocab_size: usize) -> usize {
    let digest = Sha256::digest(token.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) % vocab_size as u64) as usize
}

/// Flattens an image into `n²` rows of `p·p·c` values in `[0,1]`, patch-major.
pub fn patchify(image: &Image, patch_size: usize) -> Result<Array2<f64>> {
    let side = patch_grid_side(image, patch_size)?;
    let c = image.channels;
    let dim = patch_size * patch_size * c;
    let mut out = Array2::zeros((side * side, dim));
    for k in 0..side * side {
        let (pr, pc) = (k / side, k % side);
        let mut row = out.row_mut(k);
        let mut j = 0;
        for dy in 0..patch_size {
            for dx in 0..patch_size {
                for &v in image.pixel(pr * patch_size + dy, pc * patch_size + dx) {
                    row[j] = f64::from(v) / 255.0;
                    j += 1;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub embedding: ParamId,
    pub cls: ParamId,
    pub layers: Vec<TransformerLayer>,
    vocab_size: usize,
    width: usize,
}

impl ToyTextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Encoder;
        let embedding = store.add_scaled("text_encoder.embedding", g, cfg.vocab_size, cfg.d, 1.0, rng);
        let cls = store.add_scaled("text_encoder.cls", g, 1, cfg.d, 1.0, rng);
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("text_encoder.layer{i}"), g, cfg.d, cfg.heads, cfg.ffn_hidden, rng))
            .collect();
        Self {
            embedding,
            cls,
            layers,
            vocab_size: cfg.vocab_size,
            width: cfg.d,
        }
    }

    /// Sequence of `tokens.len() + 1` rows; an empty word list yields `[CLS]` only.
    pub fn forward(&self, g: &mut Graph<'_>, tokens: &[String], dropout: &mut Dropout) -> Var {
        let cls = g.param(self.cls);
        let x = if tokens.is_empty() {
            cls
        } else {
            let ids = tokens.iter().map(|t| token_bucket(t, self.vocab_size)).collect();
            let words = g.gather_param_rows(self.embedding, ids);
            g.concat_rows(&[cls, words])
        };
        let pos = sinusoidal_positions(tokens.len() + 1, self.width);
        let x = g.add_const(x, &pos);
        let mut x = dropout.apply(g, x);
        for layer in &self.layers {
            x = layer.forward(g, x, dropout).0;
        }
        x
    }
}

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    pub projection: Linear,
    pub cls: ParamId,
    pub layers: Vec<TransformerLayer>,
    patch_size: usize,
    width: usize,
}

impl ToyImageEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, patch_size: usize, channels: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Encoder;
        let projection = Linear::new(store, "image_encoder.projection", g, patch_size * patch_size * channels, cfg.d, rng);
        let cls = store.add_scaled("image_encoder.cls", g, 1, cfg.d, 1.0, rng);
        let layers = (0..cfg.layers)
            .map(|i| TransformerLayer::new(store, &format!("image_encoder.layer{i}"), g, cfg.d, cfg.heads, cfg.ffn_hidden, rng))
            .collect();
        Self {
            projection,
            cls,
            layers,
            patch_size,
            width: cfg.d,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Sequence of `n² + 1` rows for an image cut into `n×n` patches.
    pub fn forward(&self, g: &mut Graph<'_>, image: &Image, dropout: &mut Dropout) -> Result<Var> {
        let patches = patchify(image, self.patch_size)?;
        let expected = self.projection_input_dim(g.store());
        if patches.ncols() != expected {
            return Err(Error::invalid(format!(
                "patch vector of {} values does not match the projection input {expected}",
                patches.ncols()
            )));
        }
        let n = patches.nrows();
        let p = g.input(patches);
        let tokens = self.projection.forward(g, p);
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, tokens]);
        let pos = sinusoidal_positions(n + 1, self.width);
        let x = g.add_const(x, &pos);
        let mut x = dropout.apply(g, x);
        for layer in &self.layers {
            x = layer.forward(g, x, dropout).0;
        }
        Ok(x)
    }

    fn projection_input_dim(&self, store: &ParamStore) -> usize {
        store.value(self.projection.w).nrows()
    }
}

/// Eval-mode view of the toy encoders as a [`FeatureProvider`].
pub struct ToyFeatures<'a> {
    pub text: &'a ToyTextEncoder,
    pub image: &'a ToyImageEncoder,
    pub store: &'a ParamStore,
}

impl FeatureProvider for ToyFeatures<'_> {
    fn width(&self) -> usize {
        self.text.width
    }

    fn encode_text(&self, tokens: &[String]) -> Result<TokenSequence> {
        let mut g = Graph::new(self.store);
        let v = self.text.forward(&mut g, tokens, &mut Dropout::off());
        TokenSequence::new(g.value(v).to_owned(), Modality::Text)
    }

    fn encode_image(&self, image: &Image) -> Result<TokenSequence> {
        let mut g = Graph::new(self.store);
        let v = self.image.forward(&mut g, image, &mut Dropout::off())?;
        TokenSequence::new(g.value(v).to_owned(), Modality::Image)
    }
}
