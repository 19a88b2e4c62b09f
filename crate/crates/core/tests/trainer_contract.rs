use gamma_core::datapipe::{epoch_subsample, write_corpus, DataConfig, ImageEncoding, Manifest, Prepared, SampleRecord, Split};
use gamma_core::forge::{synthetic_corpus, ForgeOp, ForgeOptions};
use gamma_core::model::{Model, ModelConfig};
use gamma_core::trainer::{
    early_stop_check, seg_loss, total_loss, LossWeights, RunWriter, StopDecision, TrainConfig, Trainer,
};
use gamma_core::{SourceCategory, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[test]
fn seg_loss_matches_scalar_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..16).map(|_| rng.random_range(-6.0..6.0)).collect();
        let target: Vec<f64> = (0..16).map(|_| f64::from(rng.random_bool(0.5))).collect();
        let oracle: f64 = logits
            .iter()
            .zip(&target)
            .map(|(&x, &t)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 16.0;
        let got = seg_loss(&Tensor::new(vec![4, 4], logits), &Tensor::new(vec![4, 4], target)).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }
}

#[test]
fn total_loss_is_the_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows = vec![LossWeights::default()];
    rows.extend(LossWeights::GRID);
    for w in &rows {
        w.validate().unwrap();
        for _ in 0..1000 {
            let (c, a, m): (f64, f64, f64) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
            let expected = w.w_cls * c + w.w_seg_ai * a + w.w_seg_ma * m;
            assert!((total_loss(c, a, m, w) - expected).abs() < 1e-9);
        }
        assert_eq!(total_loss(1.0, 0.0, 0.0, w), w.w_cls);
        assert_eq!(total_loss(0.0, 1.0, 0.0, w), w.w_seg_ai);
        assert_eq!(total_loss(0.0, 0.0, 1.0, w), w.w_seg_ma);
    }
    let d = LossWeights::default();
    assert_eq!((d.w_cls, d.w_seg_ai, d.w_seg_ma), (2.0, 2.0, 1.0));
    let grid: Vec<(f64, f64, f64)> = LossWeights::GRID.iter().map(|w| (w.w_cls, w.w_seg_ai, w.w_seg_ma)).collect();
    assert_eq!(grid, [(2.0, 1.0, 1.0), (2.0, 3.0, 1.0), (2.0, 1.0, 2.0), (2.0, 2.0, 1.0)]);

    let equal = LossWeights::new(1.5, 1.5, 1.5);
    let (a, b, c) = (0.25, 0.5, 0.125);
    let perms = [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)];
    for (x, y, z) in perms {
        assert_eq!(total_loss(x, y, z, &equal), total_loss(a, b, c, &equal));
    }
}

/// Replays the rule by locating the last epoch that raised the running best
/// by more than `delta`.
fn replay(history: &[f64], delta: f64, patience: usize) -> StopDecision {
    let mut best = history[0];
    let mut last_improvement = 0;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v > best + delta {
            best = v;
            last_improvement = i;
        }
    }
    if history.len() - 1 - last_improvement >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    }
}

#[test]
fn early_stopping_agrees_with_rule_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut stops = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..30);
        let mut acc: f64 = rng.random_range(0.3..0.9);
        let history: Vec<f64> = (0..n)
            .map(|_| {
                acc = (acc + rng.random_range(-0.02..0.03)).clamp(0.0, 1.0);
                acc
            })
            .collect();
        let got = early_stop_check(&history, 0.01, 5).unwrap();
        assert_eq!(got, replay(&history, 0.01, 5), "{history:?}");
        stops += usize::from(got == StopDecision::Stop);
    }
    assert!(stops > 50 && stops < 950, "degenerate histories: {stops} stops");
}

#[test]
fn epoch_over_a_thousand_records_visits_one_hundred() {
    let records = (0..1000)
        .map(|i| SampleRecord {
            image_path: PathBuf::from(format!("{i}.jpg")),
            mask_mani_path: None,
            mask_ai_path: None,
            cls_label: 0,
            category: SourceCategory::Real,
            split: Split::Train,
            source: None,
        })
        .collect();
    let m = Manifest::new("/", records);
    let fraction = TrainConfig::default().epoch_fraction;
    for epoch in 0..5 {
        let sub = epoch_subsample(&m, fraction, 9, epoch).unwrap();
        assert_eq!(sub.len(), 100);
        let mut names: Vec<_> = sub.records.iter().map(|r| r.image_path.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 100);
    }
}

#[test]
fn defaults_follow_the_training_recipe() {
    let c = TrainConfig::default();
    assert_eq!(c.batch_size, 16);
    assert_eq!(c.learning_rate, 1e-4);
    assert_eq!((c.early_stop_delta, c.early_stop_patience), (0.01, 5));
}

fn fixed_batch() -> Vec<Prepared> {
    let plan = [(ForgeOp::Real, 2), (ForgeOp::Inpaint, 2), (ForgeOp::Splice, 2), (ForgeOp::Blend, 2)];
    let options = ForgeOptions {
        region_fraction: (0.4, 0.6),
        region_grid: 8,
        ..ForgeOptions::default()
    };
    synthetic_corpus(&plan, (32, 32), &options)
        .unwrap()
        .iter()
        .map(|s| {
            let sample = gamma_core::datapipe::Sample {
                image: s.image.clone(),
                mask_mani: s.masks.mani.clone(),
                mask_ai: s.masks.ai.clone(),
                cls: s.labels().cls,
                category: s.category,
            };
            Prepared::from_sample(&sample)
        })
        .collect()
}

#[test]
fn loss_on_a_fixed_batch_decreases() {
    let batch = fixed_batch();
    let config = TrainConfig {
        batch_size: batch.len(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::new(ModelConfig::toy(), 4).unwrap(), config).unwrap();
    let losses: Vec<f64> = (0..50).map(|i| trainer.step(&batch, 0, i).unwrap().losses.total).collect();
    assert!(losses[49] < losses[0], "{losses:?}");
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn same_seed_reproduces_the_loss_trajectory() {
    let batch = fixed_batch();
    let run = |workers: usize| {
        let config = TrainConfig {
            batch_size: 4,
            workers,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(Model::new(ModelConfig::micro(), 5).unwrap(), config).unwrap();
        (0..12)
            .map(|i| {
                let b = &batch[(i % 2) * 4..(i % 2) * 4 + 4];
                trainer.step(b, 0, i).unwrap().losses.total.to_bits()
            })
            .collect::<Vec<u64>>()
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(2));
}

fn corpus(dir: &std::path::Path) -> Manifest {
    let plan = [(ForgeOp::Real, 10), (ForgeOp::Inpaint, 6), (ForgeOp::CopyMove, 4)];
    let samples = synthetic_corpus(&plan, (32, 32), &ForgeOptions::default()).unwrap();
    write_corpus(dir, &samples, ImageEncoding::Png, Split::Train, None).unwrap()
}

#[test]
fn fit_logs_are_reproducible_and_checkpointed() {
    let data_dir = tempfile::tempdir().unwrap();
    let manifest = corpus(data_dir.path()).with_validation_holdout(0.05, 0);
    let (train, val) = (manifest.split(Split::Train), manifest.split(Split::Val));
    assert_eq!(val.len(), 3);
    let data = DataConfig {
        crop_size: 32,
        ..DataConfig::default()
    };
    let config = TrainConfig {
        batch_size: 4,
        epoch_fraction: 0.5,
        max_epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let out = tempfile::tempdir().unwrap();
        let mut writer = RunWriter::create(out.path(), BTreeMap::new()).unwrap();
        let mut trainer = Trainer::new(Model::new(ModelConfig::micro(), 6).unwrap(), config.clone()).unwrap();
        let summary = trainer.fit(&train, &val, &data, &mut |r, m| writer.record(r, m)).unwrap();
        drop(writer);
        assert_eq!(summary.epochs.len(), 2);
        assert_eq!(summary.epochs[0].samples, 9);
        assert_eq!(summary.epochs[0].steps, 3);
        assert!(out.path().join("checkpoints/epoch_002.ckpt").is_file());
        assert!(out.path().join(RunWriter::BEST_CHECKPOINT).is_file());
        std::fs::read_to_string(out.path().join(RunWriter::METRICS_FILE)).unwrap()
    };
    let log = run();
    assert_eq!(log.lines().count(), 2);
    assert_eq!(log, run());
}

#[test]
fn zero_learning_rate_step_is_a_no_op() {
    let batch = fixed_batch();
    let model = Model::new(ModelConfig::micro(), 7).unwrap();
    let before = model.params().clone();
    let config = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, config).unwrap();
    trainer.step(&batch[..3], 0, 0).unwrap();
    assert_eq!(trainer.model().params(), &before);
}
