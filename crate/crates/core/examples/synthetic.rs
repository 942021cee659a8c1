//! Trains on the synthetic dataset and prints test metrics.
//!
//! ```text
//! cargo run --release -p mmlnet --example synthetic -- [key=value ...]
//! ```
//! Keys are config overrides (`epochs=5`, `text_rate=50`, `ablation=drop_adapters`)
//! plus `n`, `separation`, `noise` for the generator.

use std::time::Instant;

use mmlnet::corruption::build_masks;
use mmlnet::datasets::{generate_synthetic_with, split, SyntheticConfig};
use mmlnet::metrics::evaluate;
use mmlnet::trainer::train;
use mmlnet::ExperimentConfig;

fn main() -> mmlnet::Result<()> {
    let mut synth = SyntheticConfig::default();
    let mut overrides = Vec::new();
    for arg in std::env::args().skip(1) {
        match arg.split_once('=') {
            Some(("n", v)) => synth.n = v.parse().expect("n"),
            Some(("separation", v)) => synth.separation = v.parse().expect("separation"),
            Some(("noise", v)) => synth.noise = v.parse().expect("noise"),
            _ => overrides.push(arg),
        }
    }
    let mut base = ExperimentConfig::default();
    base.model.d = 32;
    base.model.ffn_hidden = 64;
    base.model.vocab_size = 1024;
    base.model.adapter_hidden = 8;
    base.model.proj_dim = 16;
    base.data.image_side = synth.image_side;
    base.data.patch_size = synth.patch_size;
    let config = base.with_overrides(&overrides)?;

    let data = generate_synthetic_with(&synth)?;
    let (train_set, test_set) = split(&data, 0.2, synth.seed);
    let rates = config.rates();
    let started = Instant::now();
    let train_masks = build_masks(&train_set, rates, config.train.seed, config.data.patch_size)?;
    let outcome = train(&config, &train_set, &train_masks)?;
    for r in &outcome.history {
        println!(
            "epoch {:2}  loss {:8.4}  lc {:.3?}  lm {:.3?}  train {:.3}  val {:?}  lambda {:.3?}",
            r.epoch, r.total, r.lc, r.lm, r.train_acc, r.val_acc, r.lambda_o
        );
    }
    let test_masks = build_masks(&test_set, rates, config.train.seed + 1, config.data.patch_size)?;
    let report = evaluate(&outcome.best_model, &test_set, &test_masks, rates)?;
    println!(
        "best epoch {}  test acc {:.4}  macro-f1 {:.4}  auc {:.4}  ({:.1}s)",
        outcome.best_epoch,
        report.acc,
        report.macro_f1,
        report.auc,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
