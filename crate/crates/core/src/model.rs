//! The three-expert classifier.
//!
//! Text and image experts classify the adapted `[CLS]` features of their own
//! encoder. The fusion expert runs a transformer block over the concatenated
//! sequences, pools the two updated `[CLS]` rows with learned attention
//! weights and classifies the pooled vector. A learnable routing vector mixes
//! the three expert distributions into the final prediction.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::config::{Backend, ModelConfig};
use crate::datasets::Sample;
use crate::encoders::{FeatureProvider, ToyFeatures, ToyImageEncoder, ToyTextEncoder};
use crate::error::{Error, Result};
use crate::nn::{Dropout, Linear, TransformerLayer};
use crate::params::{ParamGroup, ParamId, ParamStore};

/// Number of classes (real, fake).
pub const CLASSES: usize = 2;

/// Index of each expert in routing vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expert {
    Text = 0,
    Image = 1,
    Fusion = 2,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Text, Expert::Image, Expert::Fusion];

    pub fn short(self) -> &'static str {
        match self {
            Expert::Text => "h",
            Expert::Image => "r",
            Expert::Fusion => "f",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterConfig {
    pub alpha: f64,
    pub hidden_dim: usize,
}

/// Bottleneck map `d → hidden → d` with a GELU in between.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: Linear::new(store, &format!("{name}.down"), ParamGroup::Main, width, hidden, rng),
            up: Linear::new(store, &format!("{name}.up"), ParamGroup::Main, hidden, width, rng),
        }
    }

    fn map(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.down.forward(g, x);
        let h = g.gelu(h);
        self.up.forward(g, h)
    }
}

/// `α·A(x) + (1−α)·x`.
pub fn adapt(g: &mut Graph<'_>, adapter: &Adapter, x: Var, alpha: f64) -> Var {
    let a = adapter.map(g, x);
    let a = g.scale(a, alpha);
    let skip = g.scale(x, 1.0 - alpha);
    g.add(a, skip)
}

/// Value-level [`adapt`] for a single feature vector.
pub fn adapt_vector(store: &ParamStore, adapter: &Adapter, x: &[f64], alpha: f64) -> Vec<f64> {
    let mut g = Graph::new(store);
    let v = g.row_input(x);
    let out = adapt(&mut g, adapter, v, alpha);
    g.value(out).iter().copied().collect()
}

/// `softmax(W·x + b)` over the two classes.
pub fn expert_head(g: &mut Graph<'_>, head: &Linear, feature: Var) -> Var {
    let logits = head.forward(g, feature);
    g.softmax_rows(logits)
}

/// Projection used by the contrastive objective: `d → d → proj`, L2-normalised.
#[derive(Clone, Debug)]
pub struct Projection {
    pub hidden: Linear,
    pub out: Linear,
}

impl Projection {
    fn new(store: &mut ParamStore, name: &str, width: usize, proj: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), ParamGroup::Main, width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), ParamGroup::Main, width, proj, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.gelu(h);
        let z = self.out.forward(g, h);
        g.l2_normalize_rows(z)
    }
}

/// Transformer block(s) over `(H, R)` plus the attention pooling of the two `[CLS]` rows.
#[derive(Clone, Debug)]
pub struct FusionExpert {
    pub layers: Vec<TransformerLayer>,
    pub pool: Linear,
    pub head: Linear,
}

pub struct FusionOutput {
    pub f: Var,
    pub y_f: Var,
    /// 1×2 pooling weights `(p_t, p_v)`.
    pub pool: Var,
    /// Per-layer, per-head attention matrices.
    pub attention: Vec<Vec<Var>>,
    pub sequence_len: usize,
    pub text_cls: Var,
    pub image_cls: Var,
}

/// Concatenates `H` and `R`, applies the fusion block, pools the updated
/// `[CLS]` rows and classifies the pooled feature.
pub fn fuse_multimodal(g: &mut Graph<'_>, fusion: &FusionExpert, h: Var, r: Var) -> Result<FusionOutput> {
    let (lh, dh) = g.shape(h);
    let (lr, dr) = g.shape(r);
    if dh != dr {
        return Err(Error::invalid(format!("text width {dh} and image width {dr} differ")));
    }
    let mut x = g.concat_rows(&[h, r]);
    let mut attention = Vec::with_capacity(fusion.layers.len());
    for layer in &fusion.layers {
        let (y, probs) = layer.forward(g, x, &mut Dropout::off());
        attention.push(probs);
        x = y;
    }
    let text_cls = g.slice_rows(x, 0, 1);
    let image_cls = g.slice_rows(x, lh, 1);
    let pair = g.concat_cols(&[text_cls, image_cls]);
    let logits = fusion.pool.forward(g, pair);
    let pool = g.softmax_rows(logits);
    let stacked = g.concat_rows(&[text_cls, image_cls]);
    let f = g.matmul(pool, stacked);
    let y_f = expert_head(g, &fusion.head, f);
    Ok(FusionOutput {
        f,
        y_f,
        pool,
        attention,
        sequence_len: lh + lr,
        text_cls,
        image_cls,
    })
}

/// `λ = softmax(logits)` and `y_o = Σ_M λ_M·y^M`.
pub fn route(y_h: [f64; 2], y_r: [f64; 2], y_f: [f64; 2], lambda_logits: [f64; 3]) -> ([f64; 2], [f64; 3]) {
    let mut lambda = lambda_logits;
    softmax_in_place(&mut lambda);
    let mut y = [0.0; 2];
    for (w, e) in lambda.iter().zip([y_h, y_r, y_f]) {
        y[0] += w * e[0];
        y[1] += w * e[1];
    }
    (y, lambda)
}

fn route_graph(g: &mut Graph<'_>, logits: ParamId, y_h: Var, y_r: Var, y_f: Var) -> (Var, Var) {
    let l = g.param(logits);
    let lambda = g.softmax_rows(l);
    let stacked = g.concat_rows(&[y_h, y_r, y_f]);
    (g.matmul(lambda, stacked), lambda)
}

pub enum Backbone {
    Toy { text: ToyTextEncoder, image: ToyImageEncoder },
    External(Arc<dyn FeatureProvider>),
}

impl std::fmt::Debug for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backbone::Toy { .. } => f.write_str("Backbone::Toy"),
            Backbone::External(p) => write!(f, "Backbone::External(width={})", p.width()),
        }
    }
}

/// Model structure: parameter ids into a separate [`ParamStore`].
#[derive(Debug)]
pub struct MmlNet {
    pub config: ModelConfig,
    pub patch_size: usize,
    pub backbone: Backbone,
    pub text_adapter: Adapter,
    pub image_adapter: Adapter,
    pub text_head: Linear,
    pub image_head: Linear,
    pub fusion: FusionExpert,
    pub projections: [Projection; 3],
    pub route_logits: ParamId,
    alpha: f64,
}

/// Per-sample outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBundle {
    pub f_t: Vec<f64>,
    pub f_i: Vec<f64>,
    pub f: Vec<f64>,
    /// Projected, normalised features of `f_t`, `f_i`, `f` (contrastive inputs).
    pub z: [Vec<f64>; 3],
    pub y_h: [f64; 2],
    pub y_r: [f64; 2],
    pub y_f: [f64; 2],
    pub y_o: [f64; 2],
    pub lambda_o: [f64; 3],
    pub p_t: f64,
    pub p_v: f64,
}

impl ExpertBundle {
    pub fn expert(&self, e: Expert) -> [f64; 2] {
        match e {
            Expert::Text => self.y_h,
            Expert::Image => self.y_r,
            Expert::Fusion => self.y_f,
        }
    }

    pub fn raw(&self, e: Expert) -> &[f64] {
        match e {
            Expert::Text => &self.f_t,
            Expert::Image => &self.f_i,
            Expert::Fusion => &self.f,
        }
    }

    pub fn predicted_label(&self) -> u8 {
        u8::from(self.y_o[1] > self.y_o[0])
    }

    pub fn is_finite(&self) -> bool {
        let vecs = [&self.f_t, &self.f_i, &self.f, &self.z[0], &self.z[1], &self.z[2]];
        vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && [self.y_h, self.y_r, self.y_f, self.y_o].iter().flatten().all(|x| x.is_finite())
            && self.lambda_o.iter().all(|x| x.is_finite())
            && self.p_t.is_finite()
            && self.p_v.is_finite()
    }
}

/// A recorded forward pass of one sample, ready for back-propagation.
pub struct SampleTrace<'p> {
    pub graph: Graph<'p>,
    pub text_seq: Var,
    pub image_seq: Var,
    pub f_t: Var,
    pub f_i: Var,
    pub fusion: FusionOutput,
    pub y_h: Var,
    pub y_r: Var,
    pub y_o: Var,
    pub lambda_o: Var,
    pub z: [Var; 3],
}

impl SampleTrace<'_> {
    pub fn expert_output(&self, e: Expert) -> Var {
        match e {
            Expert::Text => self.y_h,
            Expert::Image => self.y_r,
            Expert::Fusion => self.fusion.y_f,
        }
    }

    pub fn raw_feature(&self, e: Expert) -> Var {
        match e {
            Expert::Text => self.f_t,
            Expert::Image => self.f_i,
            Expert::Fusion => self.fusion.f,
        }
    }

    pub fn bundle(&self) -> ExpertBundle {
        let g = &self.graph;
        let row = |v: Var| g.value(v).iter().copied().collect::<Vec<f64>>();
        let pair = |v: Var| {
            let a = g.value(v);
            [a[[0, 0]], a[[0, 1]]]
        };
        let lam = g.value(self.lambda_o);
        let pool = g.value(self.fusion.pool);
        ExpertBundle {
            f_t: row(self.f_t),
            f_i: row(self.f_i),
            f: row(self.fusion.f),
            z: [row(self.z[0]), row(self.z[1]), row(self.z[2])],
            y_h: pair(self.y_h),
            y_r: pair(self.y_r),
            y_f: pair(self.fusion.y_f),
            y_o: pair(self.y_o),
            lambda_o: [lam[[0, 0]], lam[[0, 1]], lam[[0, 2]]],
            p_t: pool[[0, 0]],
            p_v: pool[[0, 1]],
        }
    }
}

impl MmlNet {
    /// Builds a toy-backend model and its freshly initialised parameters.
    pub fn new(config: &ModelConfig, patch_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        if config.backend != Backend::Toy {
            return Err(Error::Config(
                "the external backend needs a FeatureProvider; use MmlNet::with_provider".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = ToyTextEncoder::new(&mut store, config, &mut rng);
        let image = ToyImageEncoder::new(&mut store, config, patch_size, 3, &mut rng);
        let net = Self::build_heads(config, patch_size, Backbone::Toy { text, image }, &mut store, &mut rng);
        Ok((net, store))
    }

    /// Builds a model over a frozen external encoder pair.
    pub fn with_provider(
        config: &ModelConfig,
        patch_size: usize,
        provider: Arc<dyn FeatureProvider>,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        if provider.width() != config.d {
            return Err(Error::Config(format!(
                "provider width {} does not match model.d={}",
                provider.width(),
                config.d
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Self::build_heads(config, patch_size, Backbone::External(provider), &mut store, &mut rng);
        Ok((net, store))
    }

    fn build_heads(
        config: &ModelConfig,
        patch_size: usize,
        backbone: Backbone,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = config.d;
        let main = ParamGroup::Main;
        let text_adapter = Adapter::new(store, "adapter.text", d, config.adapter_hidden, rng);
        let image_adapter = Adapter::new(store, "adapter.image", d, config.adapter_hidden, rng);
        let text_head = Linear::new(store, "head.text", main, d, CLASSES, rng);
        let image_head = Linear::new(store, "head.image", main, d, CLASSES, rng);
        let layers = (0..config.fusion_layers)
            .map(|i| TransformerLayer::new(store, &format!("fusion.layer{i}"), main, d, config.heads, config.ffn_hidden, rng))
            .collect();
        let pool = Linear::new(store, "fusion.pool", main, 2 * d, 2, rng);
        let head = Linear::new(store, "head.fusion", main, d, CLASSES, rng);
        let projections = [
            Projection::new(store, "projection.text", d, config.proj_dim, rng),
            Projection::new(store, "projection.image", d, config.proj_dim, rng),
            Projection::new(store, "projection.fusion", d, config.proj_dim, rng),
        ];
        let route_logits = store.add_zeros("routing.logits", main, 1, 3);
        Self {
            config: config.clone(),
            patch_size,
            backbone,
            text_adapter,
            image_adapter,
            text_head,
            image_head,
            fusion: FusionExpert { layers, pool, head },
            projections,
            route_logits,
            alpha: config.alpha,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Overrides the residual ratio (used to disable the adapters).
    pub fn set_alpha(&mut self, alpha: f64) {
        self.alpha = alpha;
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            alpha: self.alpha,
            hidden_dim: self.config.adapter_hidden,
        }
    }

    pub fn provider<'a>(&'a self, store: &'a ParamStore) -> Box<dyn FeatureProvider + 'a> {
        match &self.backbone {
            Backbone::Toy { text, image } => Box::new(ToyFeatures { text, image, store }),
            Backbone::External(p) => Box::new(ArcProvider(p.clone())),
        }
    }

    /// Records the forward pass of one (already corrupted) sample.
    pub fn trace<'p>(&self, store: &'p ParamStore, sample: &Sample, dropout: &mut Dropout) -> Result<SampleTrace<'p>> {
        let mut g = Graph::new(store);
        let (h, r) = match &self.backbone {
            Backbone::Toy { text, image } => {
                let h = text.forward(&mut g, &sample.text, dropout);
                let r = image.forward(&mut g, &sample.image, dropout)?;
                (h, r)
            }
            Backbone::External(p) => {
                let h = p.encode_text(&sample.text)?;
                let r = p.encode_image(&sample.image)?;
                (g.input(h.features), g.input(r.features))
            }
        };
        let h_cls = g.slice_rows(h, 0, 1);
        let r_cls = g.slice_rows(r, 0, 1);
        let f_t = adapt(&mut g, &self.text_adapter, h_cls, self.alpha);
        let f_i = adapt(&mut g, &self.image_adapter, r_cls, self.alpha);
        let y_h = expert_head(&mut g, &self.text_head, f_t);
        let y_r = expert_head(&mut g, &self.image_head, f_i);
        let fusion = fuse_multimodal(&mut g, &self.fusion, h, r)?;
        let (y_o, lambda_o) = route_graph(&mut g, self.route_logits, y_h, y_r, fusion.y_f);
        let z = [
            self.projections[0].forward(&mut g, f_t),
            self.projections[1].forward(&mut g, f_i),
            self.projections[2].forward(&mut g, fusion.f),
        ];
        Ok(SampleTrace {
            graph: g,
            text_seq: h,
            image_seq: r,
            f_t,
            f_i,
            fusion,
            y_h,
            y_r,
            y_o,
            lambda_o,
            z,
        })
    }

    /// Eval-mode forward pass.
    pub fn forward(&self, store: &ParamStore, sample: &Sample) -> Result<ExpertBundle> {
        Ok(self.trace(store, sample, &mut Dropout::off())?.bundle())
    }

    pub fn lambda_logits(&self, store: &ParamStore) -> [f64; 3] {
        let v = store.value(self.route_logits);
        [v[[0, 0]], v[[0, 1]], v[[0, 2]]]
    }

    pub fn set_lambda_logits(&self, store: &mut ParamStore, logits: [f64; 3]) {
        let v = store.value_mut(self.route_logits);
        *v = Array2::from_shape_vec((1, 3), logits.to_vec()).expect("1x3");
    }
}

struct ArcProvider(Arc<dyn FeatureProvider>);

impl FeatureProvider for ArcProvider {
    fn width(&self) -> usize {
        self.0.width()
    }
    fn encode_text(&self, tokens: &[String]) -> Result<crate::encoders::TokenSequence> {
        self.0.encode_text(tokens)
    }
    fn encode_image(&self, image: &crate::datasets::Image) -> Result<crate::encoders::TokenSequence> {
        self.0.encode_image(image)
    }
}
