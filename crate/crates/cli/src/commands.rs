//! Forge, train and eval commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gamma_core::datapipe::{mix, write_corpus, ImageEncoding, Manifest, Split};
use gamma_core::evalkit::{self, EvalConfig, EvalReport};
use gamma_core::forge::{forge_one, synthetic_authentic, ForgedSample};
use gamma_core::model::{load_checkpoint, Model};
use gamma_core::trainer::{FitSummary, RunWriter, Trainer};
use gamma_core::SourceCategory;
use image::RgbImage;

use crate::settings::Settings;
use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SUMMARY_FILE: &str = "summary.json";

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn source_images(dir: &Path) -> Result<Vec<RgbImage>, Failure> {
    if !dir.is_dir() {
        return Err(Failure::data(format!("input directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(Failure::io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            image::open(p)
                .map(|i| i.to_rgb8())
                .map_err(|e| Failure::data(format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Loads and checks a manifest; I/O failures name the file.
pub fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    Manifest::load(path).map_err(|e| match e {
        gamma_core::Error::Io(io) => Failure::data(format!("manifest {}: {io}", path.display())),
        other => other.into(),
    })
}

/// Writes forged images, masks and `manifest.tsv`; returns the manifest.
pub fn forge(settings: &Settings) -> Result<Manifest, Failure> {
    let f = &settings.forge;
    let out = &settings.output_dir;
    settings.write_snapshot(out)?;
    let sources = match &f.input_dir {
        Some(dir) => source_images(dir)?,
        None => (0..f.synthetic)
            .map(|i| synthetic_authentic(f.size[0], f.size[1], mix(settings.seed, i as u64)))
            .collect(),
    };
    let n = f.count.unwrap_or(sources.len());
    if n > 0 && sources.is_empty() {
        return Err(Failure::data("no source images: pass --input with images or --synthetic N"));
    }
    if n > 0 && f.ops.is_empty() {
        return Err(Failure::usage("no forge ops selected"));
    }
    let samples: Vec<ForgedSample> = (0..n)
        .map(|i| {
            let op = f.ops[i % f.ops.len()];
            let source = &sources[i % sources.len()];
            let donor = &sources[(i + 1) % sources.len()];
            forge_one(op, source, donor, None, mix(settings.seed ^ 0xF0_F0, i as u64), &f.options)
        })
        .collect::<gamma_core::Result<_>>()?;
    let manifest = write_corpus(out, &samples, ImageEncoding::Jpeg(f.options.jpeg_quality), Split::Train, None)?;
    let manifest = manifest.with_holdout(Split::Test, f.test_fraction, settings.seed);
    manifest.save(out.join(MANIFEST_FILE))?;
    let counts = manifest.category_counts();
    for c in SourceCategory::ALL {
        println!("{:<16}{}", c.as_str(), counts.get(&c).copied().unwrap_or(0));
    }
    println!("{:<16}{}", "total", manifest.len());
    Ok(manifest)
}

/// Train, validation and test views of a manifest. Validation records are
/// held out of the training split when the manifest has none.
pub fn splits(manifest: &Manifest, settings: &Settings) -> (Manifest, Manifest, Manifest) {
    let m = manifest.with_validation_holdout(settings.data.val_fraction, settings.seed);
    (m.split(Split::Train), m.split(Split::Val), m.split(Split::Test))
}

/// Best-on-validation model of a finished run.
pub struct TrainOutcome {
    pub best: Model,
    pub summary: FitSummary,
}

/// Fits a fresh model and writes metrics and checkpoints under `dir`.
pub fn train_model(settings: &Settings, train: &Manifest, val: &Manifest, dir: &Path) -> Result<TrainOutcome, Failure> {
    if train.is_empty() {
        return Err(Failure::data("training split is empty"));
    }
    let model = Model::new(settings.model.clone(), settings.seed)?;
    let mut trainer = Trainer::new(model, settings.train.clone())?;
    let metadata = BTreeMap::from([("seed".to_string(), settings.seed.to_string())]);
    let mut writer = RunWriter::create(dir, metadata)?;
    let mut best = None;
    let summary = trainer.fit(train, val, &settings.data, &mut |record, model| {
        writer.record(record, model)?;
        log::info!(
            "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}{}",
            record.epoch,
            record.loss_total,
            record.train_accuracy,
            record.val_accuracy,
            if record.best { "  *" } else { "" }
        );
        if record.best {
            best = Some(model.clone());
        }
        Ok(())
    })?;
    let best = best.unwrap_or_else(|| trainer.model().clone());
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(Failure::io)?;
    Ok(TrainOutcome { best, summary })
}

pub fn train(settings: &Settings) -> Result<TrainOutcome, Failure> {
    let manifest = load_manifest(settings.require_manifest()?)?;
    settings.write_snapshot(&settings.output_dir)?;
    let (train, val, _) = splits(&manifest, settings);
    log::info!("training on {} records, validating on {}", train.len(), val.len());
    let outcome = train_model(settings, &train, &val, &settings.output_dir)?;
    println!(
        "{} epochs, best validation accuracy {:.4}{}",
        outcome.summary.epochs.len(),
        outcome.summary.best_val_accuracy,
        if outcome.summary.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(outcome)
}

pub fn eval_config(settings: &Settings) -> EvalConfig {
    EvalConfig {
        data: settings.data.clone(),
        jpeg_quality: settings.eval.format_align.then_some(settings.eval.jpeg_quality),
        workers: settings.train.workers,
    }
}

/// Evaluates `model` on `manifest`, with the robustness curve when
/// qualities are configured, and writes the configured report formats.
pub fn evaluate_model(settings: &Settings, model: &Model, manifest: &Manifest, dir: &Path) -> Result<EvalReport, Failure> {
    if manifest.is_empty() {
        return Err(Failure::data("evaluation set is empty"));
    }
    let cfg = eval_config(settings);
    let evals = evalkit::evaluate_manifest(model, manifest, &cfg)?;
    let curve = if settings.eval.qualities.is_empty() {
        Vec::new()
    } else {
        evalkit::robustness_sweep(model, manifest, &cfg, &settings.eval.qualities)?
    };
    let report = evalkit::build_report(&evals, curve)?;
    for &format in &settings.eval.formats {
        evalkit::emit_report(&report, format, dir)?;
    }
    Ok(report)
}

pub fn eval(settings: &Settings) -> Result<EvalReport, Failure> {
    let path = settings
        .checkpoint
        .as_deref()
        .ok_or_else(|| Failure::usage("a checkpoint is required"))?;
    let checkpoint = load_checkpoint(path).map_err(|e| match e {
        gamma_core::Error::Io(io) => Failure::data(format!("checkpoint {}: {io}", path.display())),
        other => other.into(),
    })?;
    let manifest = load_manifest(settings.require_manifest()?)?;
    let manifest = match settings.eval.split {
        Some(s) => manifest.split(s),
        None => manifest,
    };
    let mut resolved = settings.clone();
    resolved.model = checkpoint.config.clone();
    resolved.write_snapshot(&settings.output_dir)?;
    let model = checkpoint.into_model()?;
    let report = evaluate_model(&resolved, &model, &manifest, &settings.output_dir)?;
    print!("{}", evalkit::to_text_table(&report)?);
    Ok(report)
}
