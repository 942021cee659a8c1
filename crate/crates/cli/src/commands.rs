use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use mmlnet::config::toggle_set_label;
use mmlnet::corruption::{build_masks, load_masks, save_masks, scenario_grid};
use mmlnet::datasets::{generate_synthetic_with, load_manifest, split, summarize, write_manifest, SyntheticConfig};
use mmlnet::error::Result;
use mmlnet::metrics::{evaluate, MetricsReport};
use mmlnet::report::{
    collect_reports, merge_grid, render_ablation, render_ablation_delimited, render_grid, render_grid_delimited,
    write_reports, AblationRow, METRICS_FILE,
};
use mmlnet::trainer::{train, write_history};
use mmlnet::{Error, ExperimentConfig, MaskSpec, MissingRates, Sample, Toggle, TrainedModel};

use crate::record::RunRecord;
use crate::{AblateArgs, Cli, Command, CorruptArgs, DatasetsCommand, EvaluateArgs, SweepArgs, TrainArgs};

/// Cache directory for drawn mask files, shared across runs.
pub const CACHE_ENV: &str = "MMLNET_CACHE_DIR";

struct Ctx {
    config: ExperimentConfig,
    out: PathBuf,
    argv: Vec<String>,
}

impl Ctx {
    fn stamp(&self, config: &ExperimentConfig, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        RunRecord::new(config, &self.argv, outputs).write(dir)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    base.with_overrides(&overrides)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let config = load_config(&cli)?;
    let ctx = Ctx {
        config,
        out: cli.out.clone(),
        argv,
    };
    match cli.command {
        Command::Corrupt(args) => corrupt(&ctx, &args),
        Command::Train(args) => train_cmd(&ctx, &args),
        Command::Evaluate(args) => evaluate_cmd(&ctx, &args),
        Command::Sweep(args) => sweep_cmd(&ctx, &args),
        Command::Ablate(args) => ablate_cmd(&ctx, &args),
        Command::Report(args) => report_cmd(&ctx, &args.runs),
        Command::Datasets { command } => datasets_cmd(&ctx, command),
    }
}

fn manifest(ctx: &Ctx, path: &Path) -> Result<Vec<Sample>> {
    load_manifest(path, ctx.config.data.image_side)
}

pub fn mask_file_name(rates: MissingRates) -> String {
    format!("masks_{}.jsonl", rates.tag())
}

fn corrupt(ctx: &Ctx, args: &CorruptArgs) -> Result<()> {
    let samples = manifest(ctx, &args.manifest)?;
    let scenarios = if args.grid {
        scenario_grid()
    } else {
        let defaults = ctx.config.rates();
        vec![MissingRates::new(
            args.text_rate.unwrap_or(defaults.text_rate),
            args.image_rate.unwrap_or(defaults.image_rate),
        )?]
    };
    ensure_dir(&ctx.out)?;
    let seed = ctx.config.train.seed;
    let mut outputs = Vec::new();
    for rates in scenarios {
        let masks = build_masks(&samples, rates, seed, ctx.config.data.patch_size)?;
        let path = ctx.out.join(mask_file_name(rates));
        save_masks(&masks, &path)?;
        println!(
            "{}: {} samples, text {}% / image {}%, seed {}",
            path.display(),
            masks.len(),
            rates.text_rate,
            rates.image_rate,
            seed
        );
        outputs.push(path);
    }
    ctx.stamp(&ctx.config, &ctx.out, outputs)
}

/// Trains and writes checkpoints, history and the effective config into `dir`.
fn train_into(
    config: &ExperimentConfig,
    samples: &[Sample],
    masks: &[MaskSpec],
    dir: &Path,
) -> Result<(TrainedModel, Vec<PathBuf>)> {
    ensure_dir(dir)?;
    let outcome = train(config, samples, masks)?;
    let final_path = dir.join("checkpoint_final.ckpt");
    let best_path = dir.join("checkpoint_best.ckpt");
    let history_path = dir.join("history.jsonl");
    let config_path = dir.join("config.toml");
    outcome.final_model.save(&final_path)?;
    outcome.best_model.save(&best_path)?;
    write_history(&outcome.history, &history_path)?;
    write_text(&config_path, &config.to_toml_string())?;
    if let Some(last) = outcome.history.last() {
        println!(
            "{}: {} epochs, final loss {:.4}, train acc {:.4}, best epoch {}",
            dir.display(),
            last.epoch,
            last.total,
            last.train_acc,
            outcome.best_epoch
        );
    }
    Ok((outcome.best_model, vec![final_path, best_path, history_path, config_path]))
}

fn train_cmd(ctx: &Ctx, args: &TrainArgs) -> Result<()> {
    let config = &ctx.config;
    let masks = load_masks(&args.masks)?;
    let rates = config.rates();
    if let Some(m) = masks.iter().find(|m| m.rates() != rates) {
        return Err(Error::Config(format!(
            "{} holds masks for {} but the config asks for {}",
            args.masks.display(),
            m.rates(),
            rates
        )));
    }
    let samples = manifest(ctx, &args.manifest)?;
    println!("config hash {}", config.hash());
    let (_, outputs) = train_into(config, &samples, &masks, &ctx.out)?;
    ctx.stamp(config, &ctx.out, outputs)
}

fn print_report(r: &MetricsReport) {
    println!(
        "{}: acc {:.4}  macro-f1 {:.4}  auc {:.4}  (n = {}, config {}, seed {})",
        r.scenario.tag(),
        r.acc,
        r.macro_f1,
        r.auc,
        r.n_samples,
        r.config_hash,
        r.seed
    );
}

/// Masks for `samples` at `rates`, reused from the cache directory when set.
fn masks_for(samples: &[Sample], rates: MissingRates, seed: u64, patch_size: usize, manifest: &Path) -> Result<Vec<MaskSpec>> {
    let Ok(cache) = std::env::var(CACHE_ENV) else {
        return build_masks(samples, rates, seed, patch_size);
    };
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    let dir = PathBuf::from(cache).join(format!("{stem}-seed{seed}-p{patch_size}"));
    let path = dir.join(mask_file_name(rates));
    if path.exists() {
        let masks = load_masks(&path)?;
        let ids: BTreeSet<&str> = masks.iter().map(|m| m.sample_id.as_str()).collect();
        if masks.len() == samples.len() && samples.iter().all(|s| ids.contains(s.id.as_str())) {
            return Ok(masks);
        }
    }
    let masks = build_masks(samples, rates, seed, patch_size)?;
    ensure_dir(&dir)?;
    save_masks(&masks, &path)?;
    Ok(masks)
}

fn evaluate_cmd(ctx: &Ctx, args: &EvaluateArgs) -> Result<()> {
    let expected = if args.force { None } else { Some(ctx.config.hash()) };
    let model = match TrainedModel::load(&args.checkpoint, expected.as_deref()) {
        Err(Error::Checkpoint(msg)) if msg.contains("differs from expected") => {
            return Err(Error::Config(format!("{msg}; pass the training config or --force")));
        }
        other => other?,
    };
    let samples = manifest(ctx, &args.manifest)?;
    let rates = model.config.rates();
    let masks = match &args.masks {
        Some(path) => load_masks(path)?,
        None => masks_for(&samples, rates, ctx.config.train.seed, model.config.data.patch_size, &args.manifest)?,
    };
    let report = evaluate(&model, &samples, &masks, rates)?;
    print_report(&report);
    ensure_dir(&ctx.out)?;
    let path = ctx.out.join(METRICS_FILE);
    write_reports(std::slice::from_ref(&report), &path)?;
    ctx.stamp(&model.config, &ctx.out, vec![path])
}

fn run_scenario(
    ctx: &Ctx,
    config: &ExperimentConfig,
    train_set: &[Sample],
    test_set: &[Sample],
    paths: (&Path, &Path),
    dir: &Path,
) -> Result<MetricsReport> {
    let rates = config.rates();
    let seed = config.train.seed;
    let patch = config.data.patch_size;
    let train_masks = masks_for(train_set, rates, seed, patch, paths.0)?;
    let test_masks = masks_for(test_set, rates, seed, patch, paths.1)?;
    let (model, mut outputs) = train_into(config, train_set, &train_masks, dir)?;
    let report = evaluate(&model, test_set, &test_masks, rates)?;
    print_report(&report);
    let metrics = dir.join(METRICS_FILE);
    write_reports(std::slice::from_ref(&report), &metrics)?;
    outputs.push(metrics);
    ctx.stamp(config, dir, outputs)?;
    Ok(report)
}

fn sweep_cmd(ctx: &Ctx, args: &SweepArgs) -> Result<()> {
    let scenarios = if args.scenarios.is_empty() {
        scenario_grid()
    } else {
        args.scenarios
            .iter()
            .map(|tag| {
                let rates = MissingRates::parse_tag(tag)
                    .ok_or_else(|| Error::Config(format!("'{tag}' is not a scenario tag like t25_i75")))?;
                if !rates.is_grid_scenario() {
                    return Err(Error::Config(format!("{tag} is not a grid scenario")));
                }
                Ok(rates)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let train_set = manifest(ctx, &args.train_manifest)?;
    let test_set = manifest(ctx, &args.test_manifest)?;
    ensure_dir(&ctx.out)?;
    let mut reports = Vec::new();
    for rates in scenarios {
        let mut config = ctx.config.clone();
        config.set_rates(rates);
        let dir = ctx.out.join(rates.tag());
        let paths = (args.train_manifest.as_path(), args.test_manifest.as_path());
        reports.push(run_scenario(ctx, &config, &train_set, &test_set, paths, &dir)?);
    }
    let outputs = write_grid(&ctx.out, &reports)?;
    ctx.stamp(&ctx.config, &ctx.out, outputs)
}

fn write_grid(dir: &Path, reports: &[MetricsReport]) -> Result<Vec<PathBuf>> {
    let rows = merge_grid(reports)?;
    let text = render_grid(&rows);
    print!("{text}");
    let metrics = dir.join(METRICS_FILE);
    let table = dir.join("grid.txt");
    let csv = dir.join("grid.csv");
    write_reports(reports, &metrics)?;
    write_text(&table, &text)?;
    write_text(&csv, &render_grid_delimited(&rows, ','))?;
    Ok(vec![metrics, table, csv])
}

fn parse_toggle_set(spec: &str) -> Result<BTreeSet<Toggle>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn ablate_cmd(ctx: &Ctx, args: &AblateArgs) -> Result<()> {
    let variants: Vec<BTreeSet<Toggle>> = args
        .variants
        .iter()
        .map(|v| parse_toggle_set(v))
        .collect::<Result<_>>()?;
    let train_set = manifest(ctx, &args.train_manifest)?;
    let test_set = manifest(ctx, &args.test_manifest)?;
    ensure_dir(&ctx.out)?;
    let mut runs = vec![(String::from("base"), ctx.config.train.ablation.clone())];
    for set in variants {
        let mut combined = ctx.config.train.ablation.clone();
        combined.extend(set.iter().copied());
        let name = set.iter().map(|t| t.name()).collect::<Vec<_>>().join("+");
        runs.push((name, combined));
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for (name, set) in runs {
        let mut config = ctx.config.clone();
        config.train.ablation = set.clone();
        let dir = ctx.out.join(&name);
        let paths = (args.train_manifest.as_path(), args.test_manifest.as_path());
        let report = run_scenario(ctx, &config, &train_set, &test_set, paths, &dir)?;
        rows.push(AblationRow {
            label: toggle_set_label(&set),
            acc: report.acc,
            macro_f1: report.macro_f1,
            auc: report.auc,
        });
        reports.push(report);
    }
    let text = render_ablation(&rows);
    print!("{text}");
    let table = ctx.out.join("ablation.txt");
    let csv = ctx.out.join("ablation.csv");
    write_text(&table, &text)?;
    write_text(&csv, &render_ablation_delimited(&rows, ','))?;
    ctx.stamp(&ctx.config, &ctx.out, vec![table, csv])
}

fn report_cmd(ctx: &Ctx, runs: &[PathBuf]) -> Result<()> {
    let reports = collect_reports(runs)?;
    let rows = merge_grid(&reports)?;
    let text = render_grid(&rows);
    print!("{text}");
    ensure_dir(&ctx.out)?;
    let table = ctx.out.join("grid.txt");
    let csv = ctx.out.join("grid.csv");
    write_text(&table, &text)?;
    write_text(&csv, &render_grid_delimited(&rows, ','))?;
    ctx.stamp(&ctx.config, &ctx.out, vec![table, csv])
}

fn datasets_cmd(ctx: &Ctx, command: DatasetsCommand) -> Result<()> {
    match command {
        DatasetsCommand::Validate { manifest: path } => {
            let samples = manifest(ctx, &path)?;
            let s = summarize(&samples);
            println!("{}: ok", path.display());
            println!("{}", serde_json::to_string_pretty(&s).map_err(|e| Error::Invariant(e.to_string()))?);
            Ok(())
        }
        DatasetsCommand::Generate {
            n,
            separation,
            noise,
            test_fraction,
        } => {
            let cfg = SyntheticConfig {
                n,
                seed: ctx.config.train.seed,
                separation,
                noise,
                image_side: ctx.config.data.image_side,
                patch_size: ctx.config.data.patch_size,
            };
            let samples = generate_synthetic_with(&cfg)?;
            let (train_set, test_set) = split(&samples, test_fraction, cfg.seed);
            ensure_dir(&ctx.out)?;
            let train_path = ctx.out.join("train.jsonl");
            let test_path = ctx.out.join("test.jsonl");
            write_manifest(&train_set, &train_path)?;
            write_manifest(&test_set, &test_path)?;
            println!(
                "{}: {} samples, {}: {} samples",
                train_path.display(),
                train_set.len(),
                test_path.display(),
                test_set.len()
            );
            ctx.stamp(&ctx.config, &ctx.out, vec![train_path, test_path])
        }
    }
}
