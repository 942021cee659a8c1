//! Modality missing learning loss, cross-entropy and the combined objective.
//!
//! Two implementations live here. The value-level functions (`mml_loss`,
//! `cross_entropy`, `total_loss`) evaluate the objective directly; the
//! graph version ([`build_objective`]) records the same batch objective for
//! back-propagation and is what the trainer differentiates.

use std::collections::BTreeSet;

use ndarray::Array2;

use crate::autograd::{softmax_in_place, Graph, Var};
use crate::config::{LossConfig, Toggle};
use crate::error::{Error, Result};
use crate::model::{Expert, ExpertBundle};
use crate::params::{ParamId, ParamStore};

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Positive,
    Negative,
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("vector lengths differ: {} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("label-aware weight of a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 − cos(h_c, h)` for positives, `1 + cos(h_c, h)` for negatives.
pub fn label_aware_weight(h_c: &[f64], h: &[f64], relation: Relation) -> Result<f64> {
    let c = cosine(h_c, h)?;
    Ok(match relation {
        Relation::Positive => 1.0 - c,
        Relation::Negative => 1.0 + c,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub raw: Vec<f64>,
    pub proj: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub anchor_raw: Vec<f64>,
    pub anchor_proj: Vec<f64>,
    pub positives: Vec<Member>,
    pub negatives: Vec<Member>,
    pub tau: f64,
}

/// Variants of the contrastive term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MmlOptions {
    /// Label-aware weights; `false` sets every weight to 1.
    pub weighting: bool,
    pub include_positive_in_denominator: bool,
}

impl Default for MmlOptions {
    fn default() -> Self {
        Self {
            weighting: true,
            include_positive_in_denominator: false,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Weighted contrastive loss of one anchor. `Ok(None)` when `S_p` or `S_n`
/// is empty (the anchor is skipped).
pub fn mml_loss(batch: &ContrastiveBatch) -> Result<Option<f64>> {
    mml_loss_with(batch, MmlOptions::default())
}

pub fn mml_loss_with(batch: &ContrastiveBatch, opts: MmlOptions) -> Result<Option<f64>> {
    if !(batch.tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {}", batch.tau)));
    }
    if batch.positives.is_empty() || batch.negatives.is_empty() {
        return Ok(None);
    }
    let log_w = |m: &Member, rel| -> Result<f64> {
        if !opts.weighting {
            return Ok(0.0);
        }
        Ok(label_aware_weight(&m.raw, &batch.anchor_raw, rel)?.max(LOG_FLOOR).ln())
    };
    let logit = |m: &Member| dot(&batch.anchor_proj, &m.proj) / batch.tau;
    let mut neg = Vec::with_capacity(batch.negatives.len() + 1);
    for n in &batch.negatives {
        neg.push(log_w(n, Relation::Negative)? + logit(n));
    }
    let neg_lse = log_sum_exp(&neg);
    let mut total = 0.0;
    for p in &batch.positives {
        let num = log_w(p, Relation::Positive)? + logit(p);
        let den = if opts.include_positive_in_denominator {
            neg.push(num);
            let v = log_sum_exp(&neg);
            neg.pop();
            v
        } else {
            neg_lse
        };
        total += den - num;
    }
    Ok(Some(total / batch.positives.len() as f64))
}

/// Batch-mean `−log ŷ[label]` with the probability floored at [`LOG_FLOOR`].
pub fn cross_entropy(predicted: &[[f64; 2]], labels: &[u8]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions but {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("cross-entropy of an empty batch"));
    }
    let sum: f64 = predicted
        .iter()
        .zip(labels)
        .map(|(p, &y)| -p[usize::from(y)].max(LOG_FLOOR).ln())
        .sum();
    Ok(sum / predicted.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_m: f64,
}

/// Everything that decides the value of the batch objective.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub tau: f64,
    pub mml: MmlOptions,
    /// Cross-modal instance contrast between text and image projections
    /// instead of label-based sets.
    pub vanilla: bool,
    /// Per expert (text, image, fusion): keep the classification term.
    pub classification: [bool; 3],
    /// Per expert: keep the contrastive term.
    pub contrastive: [bool; 3],
}

impl ObjectiveSpec {
    pub fn new(loss: &LossConfig, ablation: &BTreeSet<Toggle>) -> Self {
        let on = |t| !ablation.contains(&t);
        Self {
            weights: LossWeights {
                lambda_c: loss.lambda_c,
                lambda_m: loss.lambda_m,
            },
            tau: loss.tau,
            mml: MmlOptions {
                weighting: on(Toggle::DropWeighting) && on(Toggle::VanillaMcl),
                include_positive_in_denominator: loss.include_positive_in_denominator,
            },
            vanilla: !on(Toggle::VanillaMcl),
            classification: [on(Toggle::DropLcText), on(Toggle::DropLcImage), on(Toggle::DropLcFusion)],
            contrastive: [on(Toggle::DropLmText), on(Toggle::DropLmImage), on(Toggle::DropLmFusion)],
        }
    }

    pub fn plain(loss: &LossConfig) -> Self {
        Self::new(loss, &BTreeSet::new())
    }
}

/// Value of the batch objective and its components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Classification terms of the text, image and fusion experts.
    pub lc: [f64; 3],
    /// Contrastive terms (0 when every anchor was skipped or the term is off).
    pub lm: [f64; 3],
    pub lambda: [f64; 3],
}

/// Anchor `i` of expert `e` against the rest of the batch.
fn in_batch_contrast(bundles: &[ExpertBundle], labels: &[u8], e: Expert, i: usize, tau: f64) -> ContrastiveBatch {
    let k = e as usize;
    let member = |j: usize| Member {
        raw: bundles[j].raw(e).to_vec(),
        proj: bundles[j].z[k].clone(),
    };
    let (mut positives, mut negatives) = (Vec::new(), Vec::new());
    for j in 0..bundles.len() {
        if j == i {
            continue;
        }
        if labels[j] == labels[i] {
            positives.push(member(j));
        } else {
            negatives.push(member(j));
        }
    }
    ContrastiveBatch {
        anchor_raw: bundles[i].raw(e).to_vec(),
        anchor_proj: bundles[i].z[k].clone(),
        positives,
        negatives,
        tau,
    }
}

/// Cross-modal instance contrast: the anchor's own other-modality projection
/// is the positive, every other sample's is a negative.
fn cross_modal_contrast(bundles: &[ExpertBundle], anchor: Expert, i: usize, tau: f64) -> ContrastiveBatch {
    let (a, other) = match anchor {
        Expert::Text => (0, 1),
        _ => (1, 0),
    };
    let member = |j: usize| Member {
        raw: bundles[j].z[other].clone(),
        proj: bundles[j].z[other].clone(),
    };
    ContrastiveBatch {
        anchor_raw: bundles[i].z[a].clone(),
        anchor_proj: bundles[i].z[a].clone(),
        positives: vec![member(i)],
        negatives: (0..bundles.len()).filter(|&j| j != i).map(member).collect(),
        tau,
    }
}

/// Mean contrastive loss over the non-degenerate anchors of one expert.
pub fn expert_mml(bundles: &[ExpertBundle], labels: &[u8], e: Expert, spec: &ObjectiveSpec) -> Result<f64> {
    if spec.vanilla && e == Expert::Fusion {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..bundles.len() {
        let batch = if spec.vanilla {
            cross_modal_contrast(bundles, e, i, spec.tau)
        } else {
            in_batch_contrast(bundles, labels, e, i, spec.tau)
        };
        if let Some(v) = mml_loss_with(&batch, spec.mml)? {
            sum += v;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// `Σ_M λ_M·(λ_c·L_c^M + λ_m·L_m^M)` over a batch of bundles.
pub fn total_loss(
    bundles: &[ExpertBundle],
    labels: &[u8],
    spec: &ObjectiveSpec,
    lambda_logits: [f64; 3],
) -> Result<LossBreakdown> {
    if bundles.is_empty() {
        return Err(Error::invalid("total loss of an empty batch"));
    }
    if bundles.len() != labels.len() {
        return Err(Error::invalid(format!("{} bundles but {} labels", bundles.len(), labels.len())));
    }
    let mut lambda = lambda_logits;
    softmax_in_place(&mut lambda);
    let mut out = LossBreakdown {
        total: 0.0,
        lc: [0.0; 3],
        lm: [0.0; 3],
        lambda,
    };
    for e in Expert::ALL {
        let k = e as usize;
        let preds: Vec<[f64; 2]> = bundles.iter().map(|b| b.expert(e)).collect();
        out.lc[k] = cross_entropy(&preds, labels)?;
        if spec.contrastive[k] {
            out.lm[k] = expert_mml(bundles, labels, e, spec)?;
        }
        let lc = if spec.classification[k] { out.lc[k] } else { 0.0 };
        out.total += lambda[k] * (spec.weights.lambda_c * lc + spec.weights.lambda_m * out.lm[k]);
    }
    Ok(out)
}

/// The batch objective recorded on a graph whose leaves are the per-sample
/// expert outputs and projections, plus the routing logits.
pub struct BatchObjective<'p> {
    pub graph: Graph<'p>,
    pub total: Var,
    pub lc: [Var; 3],
    pub lm: [Option<Var>; 3],
    pub lambda: Var,
    /// Per sample: leaves for `y_h`, `y_r`, `y_f`.
    pub y: Vec<[Var; 3]>,
    /// Per sample: leaves for the three projections.
    pub z: Vec<[Var; 3]>,
}

impl BatchObjective<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        let g = &self.graph;
        let lam = g.value(self.lambda);
        LossBreakdown {
            total: g.scalar(self.total),
            lc: self.lc.map(|v| g.scalar(v)),
            lm: self.lm.map(|v| v.map_or(0.0, |v| g.scalar(v))),
            lambda: [lam[[0, 0]], lam[[0, 1]], lam[[0, 2]]],
        }
    }

    /// All leaves in sample order: `y_h, y_r, y_f, z_t, z_i, z_f` per sample.
    pub fn leaves(&self) -> Vec<Var> {
        self.y
            .iter()
            .zip(&self.z)
            .flat_map(|(y, z)| y.iter().chain(z.iter()).copied())
            .collect()
    }
}

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

/// Records the contrastive term of one anchor given its similarity row
/// (`logits`, already divided by τ) and constant log-weights.
fn anchor_term(
    g: &mut Graph<'_>,
    logits: Var,
    anchor: usize,
    positives: &[(usize, f64)],
    negatives: &[(usize, f64)],
    include_positive: bool,
) -> Var {
    let neg_entries: Vec<(usize, usize)> = negatives.iter().map(|&(j, _)| (anchor, j)).collect();
    let neg_logw: Vec<f64> = negatives.iter().map(|&(_, w)| w).collect();
    let pos_entries: Vec<(usize, usize)> = positives.iter().map(|&(j, _)| (anchor, j)).collect();
    let pos_logw: f64 = positives.iter().map(|&(_, w)| w).sum::<f64>();
    let inv = 1.0 / positives.len() as f64;

    let pos = g.select(logits, pos_entries);
    let pos_sum = g.sum_all(pos);
    let numer = g.scale(pos_sum, -inv);
    let numer = g.add_const(numer, &Array2::from_elem((1, 1), -pos_logw * inv));
    if !include_positive {
        let neg = g.select(logits, neg_entries);
        let neg = g.add_const(neg, &row(&neg_logw));
        let lse = g.logsumexp_rows(neg);
        return g.add(lse, numer);
    }
    let mut dens = Vec::with_capacity(positives.len());
    for &(p, w) in positives {
        let mut entries = neg_entries.clone();
        entries.push((anchor, p));
        let mut logw = neg_logw.clone();
        logw.push(w);
        let x = g.select(logits, entries);
        let x = g.add_const(x, &row(&logw));
        dens.push(g.logsumexp_rows(x));
    }
    let dens = g.concat_cols(&dens);
    let dens = g.sum_all(dens);
    let dens = g.scale(dens, inv);
    g.add(dens, numer)
}

fn log_weight(spec: &ObjectiveSpec, a: &[f64], b: &[f64], rel: Relation) -> Result<f64> {
    if !spec.mml.weighting {
        return Ok(0.0);
    }
    Ok(label_aware_weight(a, b, rel)?.max(LOG_FLOOR).ln())
}

/// Records the contrastive term of expert `e` over stacked projections `zs`
/// (B×p). `None` when every anchor is degenerate.
fn graph_expert_mml(
    g: &mut Graph<'_>,
    bundles: &[ExpertBundle],
    labels: &[u8],
    z: &[[Var; 3]],
    e: Expert,
    spec: &ObjectiveSpec,
) -> Result<Option<Var>> {
    let n = bundles.len();
    let k = e as usize;
    let mut terms = Vec::new();
    if spec.vanilla {
        if e == Expert::Fusion {
            return Ok(None);
        }
        let (a, other) = if e == Expert::Text { (0, 1) } else { (1, 0) };
        if n < 2 {
            return Ok(None);
        }
        let anchors: Vec<Var> = z.iter().map(|zz| zz[a]).collect();
        let members: Vec<Var> = z.iter().map(|zz| zz[other]).collect();
        let za = g.concat_rows(&anchors);
        let zm = g.concat_rows(&members);
        let sim = g.matmul_t(za, zm);
        let logits = g.scale(sim, 1.0 / spec.tau);
        for i in 0..n {
            let negatives: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, 0.0)).collect();
            terms.push(anchor_term(g, logits, i, &[(i, 0.0)], &negatives, spec.mml.include_positive_in_denominator));
        }
    } else {
        let rows: Vec<Var> = z.iter().map(|zz| zz[k]).collect();
        let zs = g.concat_rows(&rows);
        let sim = g.matmul_t(zs, zs);
        let logits = g.scale(sim, 1.0 / spec.tau);
        for i in 0..n {
            let anchor = bundles[i].raw(e);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for j in (0..n).filter(|&j| j != i) {
                let other = bundles[j].raw(e);
                if labels[j] == labels[i] {
                    pos.push((j, log_weight(spec, other, anchor, Relation::Positive)?));
                } else {
                    neg.push((j, log_weight(spec, other, anchor, Relation::Negative)?));
                }
            }
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            terms.push(anchor_term(g, logits, i, &pos, &neg, spec.mml.include_positive_in_denominator));
        }
    }
    if terms.is_empty() {
        return Ok(None);
    }
    let count = terms.len();
    let all = g.concat_cols(&terms);
    let sum = g.sum_all(all);
    Ok(Some(g.scale(sum, 1.0 / count as f64)))
}

/// Records the batch objective. Gradients reach the routing logits directly
/// and the per-sample outputs through [`BatchObjective::leaves`].
pub fn build_objective<'p>(
    store: &'p ParamStore,
    route_logits: ParamId,
    bundles: &[ExpertBundle],
    labels: &[u8],
    spec: &ObjectiveSpec,
) -> Result<BatchObjective<'p>> {
    if bundles.is_empty() {
        return Err(Error::invalid("objective of an empty batch"));
    }
    if bundles.len() != labels.len() {
        return Err(Error::invalid(format!("{} bundles but {} labels", bundles.len(), labels.len())));
    }
    if !(spec.tau > 0.0) {
        return Err(Error::invalid(format!("tau must be positive, got {}", spec.tau)));
    }
    let n = bundles.len();
    let mut g = Graph::new(store);
    let y: Vec<[Var; 3]> = bundles
        .iter()
        .map(|b| [g.row_input(&b.y_h), g.row_input(&b.y_r), g.row_input(&b.y_f)])
        .collect();
    let z: Vec<[Var; 3]> = bundles
        .iter()
        .map(|b| [g.row_input(&b.z[0]), g.row_input(&b.z[1]), g.row_input(&b.z[2])])
        .collect();

    let mut lc = Vec::with_capacity(3);
    let mut lm = [None; 3];
    let mut combined = Vec::with_capacity(3);
    for e in Expert::ALL {
        let k = e as usize;
        let rows: Vec<Var> = y.iter().map(|yy| yy[k]).collect();
        let stacked = g.concat_rows(&rows);
        let picked = g.select(stacked, labels.iter().enumerate().map(|(i, &l)| (i, usize::from(l))).collect());
        let logs = g.log_floor(picked, LOG_FLOOR);
        let sum = g.sum_all(logs);
        let ce = g.scale(sum, -1.0 / n as f64);
        lc.push(ce);
        let mut term = g.scale(ce, if spec.classification[k] { spec.weights.lambda_c } else { 0.0 });
        if spec.contrastive[k] {
            if let Some(m) = graph_expert_mml(&mut g, bundles, labels, &z, e, spec)? {
                lm[k] = Some(m);
                let weighted = g.scale(m, spec.weights.lambda_m);
                term = g.add(term, weighted);
            }
        }
        combined.push(term);
    }
    let logits = g.param(route_logits);
    let lambda = g.softmax_rows(logits);
    let parts = g.concat_cols(&combined);
    let weighted = g.mul(parts, lambda);
    let total = g.sum_all(weighted);
    Ok(BatchObjective {
        graph: g,
        total,
        lc: [lc[0], lc[1], lc[2]],
        lm,
        lambda,
        y,
        z,
    })
}
