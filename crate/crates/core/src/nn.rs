//! Building blocks shared by the encoders, the fusion expert and the heads.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.w"), group, input, output, rng),
            b: store.add_zeros(format!("{name}.b"), group, 1, output),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), group, 1, width),
            bias: store.add_zeros(format!("{name}.bias"), group, 1, width),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm_rows(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Inverted dropout. Inactive when constructed with [`Dropout::off`].
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, seed: u64) -> Self {
        Self {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.p > 0.0
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        let p = self.p;
        let Some(rng) = self.rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_fn(g.shape(x), |_| if rng.random_bool(p) { 0.0 } else { keep });
        g.mask_mul(x, mask)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, group: ParamGroup, width: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, width, width, rng),
            k: Linear::new(store, &format!("{name}.k"), group, width, width, rng),
            v: Linear::new(store, &format!("{name}.v"), group, width, width, rng),
            o: Linear::new(store, &format!("{name}.o"), group, width, width, rng),
            heads,
        }
    }

    /// Scaled dot-product self-attention. Also returns each head's
    /// row-stochastic attention matrix.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> (Var, Vec<Var>) {
        let width = g.shape(x).1;
        let dk = width / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dk, dk), g.slice_cols(k, h * dk, dk), g.slice_cols(v, h * dk, dk))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            probs.push(attn);
            outs.push(g.matmul(attn, vh));
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        (self.o.forward(g, joined), probs)
    }
}

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, width, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, width),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), group, width, ffn_hidden, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), group, ffn_hidden, width, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, width),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, dropout: &mut Dropout) -> (Var, Vec<Var>) {
        let (a, probs) = self.attn.forward(g, x);
        let a = dropout.apply(g, a);
        let h = g.add(x, a);
        let h = self.norm1.forward(g, h);
        let f = self.ff_in.forward(g, h);
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f);
        let f = dropout.apply(g, f);
        let out = g.add(h, f);
        (self.norm2.forward(g, out), probs)
    }
}

/// Fixed sinusoidal position table.
pub fn sinusoidal_positions(len: usize, width: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, width), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
