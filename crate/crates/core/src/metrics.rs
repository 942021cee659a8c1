//! Accuracy, macro-F1 and rank AUC, plus per-scenario evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::corruption::{apply_masks, build_masks, scenario_grid, MaskSpec, MissingRates};
use crate::datasets::Sample;
use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} predictions but {b} labels")));
    }
    if a == 0 {
        return Err(Error::invalid("metric of an empty set"));
    }
    Ok(())
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean per-class F1 over the classes present in the labels or the
/// predictions; a class that never occurs in the labels but is predicted
/// contributes 0.
pub fn macro_f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    if let Some(bad) = predictions.iter().chain(labels).find(|&&v| v > 1) {
        return Err(Error::invalid(format!("label {bad} is not binary")));
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for c in 0..=1u8 {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &l) in predictions.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                (false, false) => {}
            }
        }
        if tp + fp + fneg == 0 {
            continue;
        }
        let denom = 2 * tp + fp + fneg;
        sum += if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        classes += 1;
    }
    Ok(sum / classes as f64)
}

/// Fraction of positive–negative pairs ordered correctly, ties counting half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    if pairs.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let positives = pairs.iter().filter(|(_, l)| *l == 1).count();
    let negatives = pairs.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes in the labels".into()));
    }
    // Sort by score and walk groups of ties: every negative below a positive
    // counts 1, every negative tied with it counts 1/2.
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut below = 0usize;
    let mut twice_correct = 0u128;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let group = &pairs[i..j];
        let pos = group.iter().filter(|(_, l)| *l == 1).count();
        let neg = group.len() - pos;
        twice_correct += (2 * pos * below + pos * neg) as u128;
        below += neg;
        i = j;
    }
    Ok(twice_correct as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: MissingRates,
    pub acc: f64,
    pub macro_f1: f64,
    pub auc: f64,
    pub n_samples: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn same_metrics(&self, other: &MetricsReport) -> bool {
        self.scenario == other.scenario
            && self.acc == other.acc
            && self.macro_f1 == other.macro_f1
            && self.auc == other.auc
            && self.n_samples == other.n_samples
    }
}

/// Eval-mode metrics of `model` on `dataset` corrupted by `masks`.
pub fn evaluate(model: &TrainedModel, dataset: &[Sample], masks: &[MaskSpec], scenario: MissingRates) -> Result<MetricsReport> {
    if let Some(m) = masks.iter().find(|m| m.rates() != scenario) {
        return Err(Error::invalid(format!(
            "mask for sample {} has rates {} but the scenario is {}",
            m.sample_id,
            m.rates(),
            scenario
        )));
    }
    let corrupted = apply_masks(dataset, masks, model.config.data.patch_size)?;
    let mut preds = Vec::with_capacity(corrupted.len());
    let mut scores = Vec::with_capacity(corrupted.len());
    for s in &corrupted {
        let b = model.forward(s)?;
        preds.push(b.predicted_label());
        scores.push(b.y_o[1]);
    }
    let labels: Vec<u8> = corrupted.iter().map(|s| s.label).collect();
    Ok(MetricsReport {
        scenario,
        acc: accuracy(&preds, &labels)?,
        macro_f1: macro_f1(&preds, &labels)?,
        auc: auc(&scores, &labels)?,
        n_samples: corrupted.len(),
        config_hash: model.config_hash(),
        seed: model.config.train.seed,
    })
}

/// One grid row; `report` is `None` when no model was trained for the scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub scenario: MissingRates,
    pub report: Option<MetricsReport>,
}

/// Evaluates each scenario's model on the dataset corrupted for that
/// scenario (masks drawn with `mask_seed`), in grid order.
pub fn sweep(models: &BTreeMap<MissingRates, TrainedModel>, dataset: &[Sample], mask_seed: u64) -> Result<Vec<SweepRow>> {
    scenario_grid()
        .into_iter()
        .map(|scenario| {
            let report = match models.get(&scenario) {
                None => None,
                Some(model) => {
                    let masks = build_masks(dataset, scenario, mask_seed, model.config.data.patch_size)?;
                    Some(evaluate(model, dataset, &masks, scenario)?)
                }
            };
            Ok(SweepRow { scenario, report })
        })
        .collect()
}
