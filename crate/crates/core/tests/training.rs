mod common;

use mmlnet::corruption::build_masks;
use mmlnet::trainer::{evaluate_objective, prepare, probe_batch, read_history, train, write_history};
use mmlnet::{MissingRates, TrainedModel};

use common::{tiny_config, tiny_samples};

#[test]
fn history_matches_recomputation_from_checkpoints() {
    let cfg = tiny_config(&["epochs=3", "text_rate=25", "image_rate=25"]);
    let samples = tiny_samples(60, 3);
    let masks = build_masks(&samples, cfg.rates(), 42, 8).unwrap();
    let outcome = train(&cfg, &samples, &masks).unwrap();
    assert_eq!(outcome.history.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    let data = prepare(&cfg, &samples, &masks).unwrap();
    let probe = probe_batch(&data.train, cfg.train.batch_size);
    for (model, epoch) in [(&outcome.final_model, 3), (&outcome.best_model, outcome.best_epoch)] {
        let path = dir.path().join(format!("epoch{epoch}.ckpt"));
        model.save(&path).unwrap();
        let reloaded = TrainedModel::load(&path, Some(&cfg.hash())).unwrap();
        assert_eq!(reloaded.epoch, epoch);
        let recomputed = evaluate_objective(&reloaded, probe).unwrap().total;
        let logged = outcome.history[epoch - 1].probe_total;
        assert!((recomputed - logged).abs() <= 1e-6, "epoch {epoch}: {recomputed} vs {logged}");
    }

    let path = dir.path().join("history.jsonl");
    write_history(&outcome.history, &path).unwrap();
    assert_eq!(read_history(&path).unwrap(), outcome.history);
}

#[test]
fn best_checkpoint_has_highest_validation_accuracy() {
    let cfg = tiny_config(&["epochs=4"]);
    let samples = tiny_samples(80, 5);
    let masks = build_masks(&samples, MissingRates::COMPLETE, 42, 8).unwrap();
    let outcome = train(&cfg, &samples, &masks).unwrap();
    let best = outcome.history.iter().filter_map(|h| h.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(outcome.history[outcome.best_epoch - 1].val_acc, Some(best));
    // Ties go to the earliest epoch.
    assert!(outcome.history[..outcome.best_epoch - 1].iter().all(|h| h.val_acc < Some(best)));
    assert!(!outcome.validation_ids.is_empty());
}

#[test]
fn training_is_reproducible_and_seed_sensitive() {
    let samples = tiny_samples(40, 9);
    let run = |seed: &str| {
        let cfg = tiny_config(&["epochs=2", seed]);
        let masks = build_masks(&samples, cfg.rates(), cfg.train.seed, 8).unwrap();
        train(&cfg, &samples, &masks).unwrap()
    };
    let (a, b, c) = (run("seed=1"), run("seed=1"), run("seed=2"));
    assert!(a.final_model.same_parameters(&b.final_model));
    assert_eq!(a.history, b.history);
    assert!(!a.final_model.same_parameters(&c.final_model));
}

#[test]
fn ablated_models_train_without_error() {
    let samples = tiny_samples(40, 11);
    for toggles in [
        "ablation=[\"drop_adapters\"]",
        "ablation=[\"vanilla_mcl\"]",
        "ablation=[\"drop_weighting\"]",
        "ablation=[\"drop_Lc_h\", \"drop_Lm_f\"]",
    ] {
        let cfg = tiny_config(&["epochs=1", toggles]);
        let masks = build_masks(&samples, cfg.rates(), 42, 8).unwrap();
        let outcome = train(&cfg, &samples, &masks).unwrap();
        assert!(outcome.history[0].total.is_finite(), "{toggles}");
        if toggles.contains("drop_adapters") {
            assert_eq!(outcome.final_model.net.alpha(), 0.0);
        }
    }
}
