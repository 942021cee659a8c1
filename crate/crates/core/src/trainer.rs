//! Deterministic training loop.
//!
//! Each mini-batch runs one recorded forward pass per sample, evaluates the
//! batch objective on a second graph whose leaves are the per-sample outputs,
//! and back-propagates through both into a single gradient accumulator before
//! the optimizer step. Data order, initialisation and dropout draws all derive
//! from `train.seed`.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::config::{ExperimentConfig, Toggle};
use crate::corruption::{apply_masks, sample_seed, MaskSpec};
use crate::datasets::{split, Sample};
use crate::error::{Error, Result};
use crate::losses::{build_objective, total_loss, LossBreakdown, ObjectiveSpec};
use crate::model::{ExpertBundle, SampleTrace};
use crate::nn::Dropout;
use crate::optim::{AdamW, GroupSettings};
use crate::params::Grads;

/// What a configuration's ablation toggles change.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveSetup {
    pub objective: ObjectiveSpec,
    pub alpha: f64,
    pub description: Vec<String>,
}

pub fn apply_ablation(config: &ExperimentConfig) -> EffectiveSetup {
    let ablation = &config.train.ablation;
    let objective = ObjectiveSpec::new(&config.loss, ablation);
    let alpha = if ablation.contains(&Toggle::DropAdapters) {
        0.0
    } else {
        config.model.alpha
    };
    let mut description = Vec::new();
    for t in ablation {
        description.push(match t {
            Toggle::DropLcText => "text classification term removed".to_string(),
            Toggle::DropLcImage => "image classification term removed".to_string(),
            Toggle::DropLcFusion => "fusion classification term removed".to_string(),
            Toggle::DropLmText => "text contrastive term removed".to_string(),
            Toggle::DropLmImage => "image contrastive term removed".to_string(),
            Toggle::DropLmFusion => "fusion contrastive term removed".to_string(),
            Toggle::DropAdapters => "adapters replaced by identity (alpha = 0)".to_string(),
            Toggle::DropWeighting => "label-aware weights fixed to 1".to_string(),
            Toggle::VanillaMcl => "contrastive term replaced by cross-modal instance contrast".to_string(),
        });
    }
    EffectiveSetup {
        objective,
        alpha,
        description,
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch objective over the epoch (train mode, before each step).
    pub total: f64,
    /// Mean classification terms (text, image, fusion).
    pub lc: [f64; 3],
    /// Mean contrastive terms (text, image, fusion).
    pub lm: [f64; 3],
    /// Accuracy of the routed prediction over the epoch's training batches.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lambda_o: [f64; 3],
    /// Objective on the probe batch (first training batch in id order,
    /// eval mode) with the end-of-epoch parameters.
    pub probe_total: f64,
}

pub struct TrainOutcome {
    pub final_model: TrainedModel,
    pub best_model: TrainedModel,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Ids of the samples held out for validation.
    pub validation_ids: Vec<String>,
}

/// Corrupted training and validation sets.
pub struct PreparedData {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
}

/// Checks the masks against the config, applies them and splits off the
/// validation part.
pub fn prepare(config: &ExperimentConfig, dataset: &[Sample], masks: &[MaskSpec]) -> Result<PreparedData> {
    let rates = config.rates();
    if let Some(m) = masks.iter().find(|m| m.rates() != rates) {
        return Err(Error::invalid(format!(
            "mask for sample {} has rates {} but the config asks for {}",
            m.sample_id,
            m.rates(),
            rates
        )));
    }
    let corrupted = apply_masks(dataset, masks, config.data.patch_size)?;
    let (train, validation) = split(&corrupted, config.train.val_fraction, sample_seed(config.train.seed, "validation", ""));
    if train.is_empty() {
        return Err(Error::invalid("no training samples left after the validation split"));
    }
    Ok(PreparedData { train, validation })
}

/// Probe batch used to record an eval-mode objective in the history.
pub fn probe_batch(train: &[Sample], batch_size: usize) -> &[Sample] {
    &train[..batch_size.min(train.len())]
}

/// Value-level objective of `samples` under `model` in eval mode.
pub fn evaluate_objective(model: &TrainedModel, samples: &[Sample]) -> Result<LossBreakdown> {
    let bundles = samples.iter().map(|s| model.forward(s)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let spec = apply_ablation(&model.config).objective;
    total_loss(&bundles, &labels, &spec, model.net.lambda_logits(&model.store))
}

pub fn accuracy_of(model: &TrainedModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut correct = 0usize;
    for s in samples {
        if model.forward(s)?.predicted_label() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Result of one optimisation step.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub bundles: Vec<ExpertBundle>,
    pub grads: Grads,
}

/// Forward and backward pass over one batch; `dropout_seed` gives each
/// sample's dropout stream (`None` runs in eval mode).
pub fn batch_gradients(
    model: &TrainedModel,
    batch: &[Sample],
    spec: &ObjectiveSpec,
    dropout_seed: Option<&dyn Fn(&Sample) -> u64>,
) -> Result<StepResult> {
    let store = &model.store;
    let p = model.config.model.dropout;
    let traces: Vec<SampleTrace<'_>> = batch
        .iter()
        .map(|s| {
            let mut dropout = match dropout_seed {
                Some(f) => Dropout::train(p, f(s)),
                None => Dropout::off(),
            };
            model.net.trace(store, s, &mut dropout)
        })
        .collect::<Result<_>>()?;
    let bundles: Vec<ExpertBundle> = traces.iter().map(|t| t.bundle()).collect();
    let labels: Vec<u8> = batch.iter().map(|s| s.label).collect();
    let objective = build_objective(store, model.net.route_logits, &bundles, &labels, spec)?;
    let mut grads = Grads::zeros_like(store);
    let leaves = objective.leaves();
    let leaf_grads = objective
        .graph
        .backward(&[(objective.total, Array2::ones((1, 1)))], &mut grads, &leaves);
    for (i, t) in traces.iter().enumerate() {
        let g = &leaf_grads[i * 6..(i + 1) * 6];
        let seeds = [
            (t.y_h, g[0].clone()),
            (t.y_r, g[1].clone()),
            (t.fusion.y_f, g[2].clone()),
            (t.z[0], g[3].clone()),
            (t.z[1], g[4].clone()),
            (t.z[2], g[5].clone()),
        ];
        t.graph.backward(&seeds, &mut grads, &[]);
    }
    Ok(StepResult {
        loss: objective.breakdown(),
        bundles,
        grads,
    })
}

fn dropout_seed(seed: u64, epoch: usize, id: &str) -> u64 {
    sample_seed(seed, &format!("dropout/{epoch}"), id)
}

/// Trains from a fresh initialisation.
pub fn train(config: &ExperimentConfig, dataset: &[Sample], masks: &[MaskSpec]) -> Result<TrainOutcome> {
    config.validate()?;
    let data = prepare(config, dataset, masks)?;
    let model = TrainedModel::init(config)?;
    train_prepared(model, &data)
}

/// Trains `model` (already initialised) on prepared data.
pub fn train_prepared(mut model: TrainedModel, data: &PreparedData) -> Result<TrainOutcome> {
    let config = model.config.clone();
    let tc = &config.train;
    let setup = apply_ablation(&config);
    model.net.set_alpha(setup.alpha);
    let mut opt = AdamW::new(
        &model.store,
        GroupSettings {
            lr: tc.lr_encoder,
            weight_decay: tc.weight_decay,
        },
        GroupSettings {
            lr: tc.lr_main,
            weight_decay: tc.weight_decay,
        },
    );
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best = model.snapshot()?;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let probe = probe_batch(&data.train, tc.batch_size);

    for epoch in 1..=tc.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(tc.seed, "epoch", &epoch.to_string())));
        let mut sum = LossBreakdown {
            total: 0.0,
            lc: [0.0; 3],
            lm: [0.0; 3],
            lambda: [0.0; 3],
        };
        let mut batches = 0usize;
        let mut correct = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| data.train[i].clone()).collect();
            let seed_fn = |s: &Sample| dropout_seed(tc.seed, epoch, &s.id);
            let mut step = batch_gradients(&model, &batch, &setup.objective, Some(&seed_fn))?;
            if !step.loss.total.is_finite() {
                return Err(Error::Invariant(format!("non-finite loss at epoch {epoch}")));
            }
            if let Some(clip) = tc.grad_clip {
                let norm = step.grads.global_norm();
                if norm > clip {
                    step.grads.scale(clip / norm);
                }
            }
            opt.step(&mut model.store, &step.grads);
            correct += step
                .bundles
                .iter()
                .zip(&batch)
                .filter(|(b, s)| b.predicted_label() == s.label)
                .count();
            sum.total += step.loss.total;
            for k in 0..3 {
                sum.lc[k] += step.loss.lc[k];
                sum.lm[k] += step.loss.lm[k];
            }
            batches += 1;
        }
        model.epoch = epoch;
        let n = batches.max(1) as f64;
        let val_acc = if data.validation.is_empty() {
            None
        } else {
            Some(accuracy_of(&model, &data.validation)?)
        };
        let probe_total = evaluate_objective(&model, probe)?.total;
        history.push(EpochRecord {
            epoch,
            total: sum.total / n,
            lc: sum.lc.map(|v| v / n),
            lm: sum.lm.map(|v| v / n),
            train_acc: correct as f64 / data.train.len() as f64,
            val_acc,
            lambda_o: {
                let mut l = model.net.lambda_logits(&model.store);
                crate::autograd::softmax_in_place(&mut l);
                l
            },
            probe_total,
        });
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        if score > best_acc || data.validation.is_empty() {
            best_acc = score;
            best_epoch = epoch;
            best = model.snapshot()?;
        }
    }
    Ok(TrainOutcome {
        final_model: model,
        best_model: best,
        best_epoch,
        history,
        validation_ids: data.validation.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Writes the history as one JSON record per line.
pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Invariant(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(path, i + 1, e.to_string())))
        .collect()
}
