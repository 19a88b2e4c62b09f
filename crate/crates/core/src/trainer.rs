//! Weighted three-term objective, Adam, the epoch loop and early stopping.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{bce_with_logits_mean, Gradients, Graph, ParamStore, Var};
use crate::datapipe::{self, mix, DataConfig, Manifest, Prepared};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::forge::SourceCategory;
use crate::model::{encode_checkpoint, ForwardPass, Model};
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

/// Per-term loss weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_seg_ai: f64,
    pub w_seg_ma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::new(2.0, 2.0, 1.0)
    }
}

impl LossWeights {
    /// Weight rows compared in the loss ablation.
    pub const GRID: [LossWeights; 4] = [
        LossWeights::new(2.0, 1.0, 1.0),
        LossWeights::new(2.0, 3.0, 1.0),
        LossWeights::new(2.0, 1.0, 2.0),
        LossWeights::new(2.0, 2.0, 1.0),
    ];

    pub const fn new(w_cls: f64, w_seg_ai: f64, w_seg_ma: f64) -> Self {
        Self {
            w_cls,
            w_seg_ai,
            w_seg_ma,
        }
    }

    /// `α·(L_cls + L_ai) + L_ma`.
    pub const fn from_alpha(alpha: f64) -> Self {
        Self::new(alpha, alpha, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_cls", self.w_cls), ("w_seg_ai", self.w_seg_ai), ("w_seg_ma", self.w_seg_ma)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

pub fn total_loss(l_cls: f64, l_seg_ai: f64, l_seg_ma: f64, weights: &LossWeights) -> f64 {
    weights.w_cls * l_cls + weights.w_seg_ai * l_seg_ai + weights.w_seg_ma * l_seg_ma
}

fn check_binary(target: &Tensor) -> Result<()> {
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::InvalidArgument("segmentation targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Mean per-pixel BCE of `logits` against a binary `target`.
///
/// Both tensors must have the same number of elements; when both carry two
/// or more axes their shapes must agree as well.
pub fn seg_loss(logits: &Tensor, target: &Tensor) -> Result<f64> {
    let shapes_clash = logits.shape().len() > 1 && target.shape().len() > 1 && logits.shape() != target.shape();
    if logits.len() != target.len() || shapes_clash {
        return Err(Error::Shape(format!(
            "logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("segmentation loss over zero pixels".into()));
    }
    check_binary(target)?;
    Ok(bce_with_logits_mean(logits.data(), target.data()))
}

/// Decision of the early-stopping rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Stops once `patience` consecutive epochs have not beaten the best value
/// so far by more than `delta`.
pub fn early_stop_check(history: &[f64], delta: f64, patience: usize) -> Result<StopDecision> {
    let (&first, rest) = history
        .split_first()
        .ok_or_else(|| Error::Empty("early stopping needs at least one epoch".into()))?;
    let mut best = first;
    let mut stale = 0;
    for &v in rest {
        if v - best > delta {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    Ok(if stale >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epoch_fraction: f64,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Threads for loading and per-sample gradients. Results do not depend
    /// on this value.
    pub workers: usize,
    /// Replacement classification labels for whole categories.
    pub cls_overrides: BTreeMap<SourceCategory, u8>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 1e-4,
            epoch_fraction: 0.10,
            early_stop_delta: 0.01,
            early_stop_patience: 5,
            max_epochs: 100,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            workers: 1,
            cls_overrides: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and nonnegative");
        }
        if !(self.epoch_fraction > 0.0 && self.epoch_fraction <= 1.0) {
            return bad("epoch_fraction must lie in (0, 1]");
        }
        if self.early_stop_delta < 0.0 || self.early_stop_patience == 0 {
            return bad("early stopping needs delta >= 0 and patience >= 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.cls_overrides.values().any(|&v| v > 1) {
            return bad("classification overrides must be 0 or 1");
        }
        self.loss_weights.validate()
    }

    /// Classification target of a sample after overrides.
    pub fn cls_target(&self, sample: &Prepared) -> u8 {
        self.cls_overrides.get(&sample.category).copied().unwrap_or(sample.cls)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Component and weighted losses of one sample or an average over many.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub seg_ai: f64,
    pub seg_ma: f64,
    pub total: f64,
}

impl LossParts {
    fn all_finite(&self) -> bool {
        self.cls.is_finite() && self.seg_ai.is_finite() && self.seg_ma.is_finite() && self.total.is_finite()
    }

    fn mean(parts: &[LossParts]) -> LossParts {
        let n = parts.len().max(1) as f64;
        let mut out = LossParts::default();
        for p in parts {
            out.cls += p.cls;
            out.seg_ai += p.seg_ai;
            out.seg_ma += p.seg_ma;
            out.total += p.total;
        }
        out.cls /= n;
        out.seg_ai /= n;
        out.seg_ma /= n;
        out.total /= n;
        out
    }
}

/// Graph nodes of the three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub cls: Var,
    pub seg_ai: Var,
    pub seg_ma: Var,
    pub total: Var,
}

/// Adds the three loss terms for `pass` to the graph.
pub fn loss_graph(
    g: &mut Graph,
    pass: &ForwardPass,
    cls_target: u8,
    mask_ai: &Tensor,
    mask_ma: &Tensor,
    weights: &LossWeights,
) -> Result<LossGraph> {
    for (name, logits, target) in [("ai", pass.mask_ai, mask_ai), ("manipulation", pass.mask_ma, mask_ma)] {
        if g.value(logits).len() != target.len() {
            return Err(Error::Shape(format!(
                "{name} mask has {} pixels, prediction has {}",
                target.len(),
                g.value(logits).len()
            )));
        }
        check_binary(target)?;
    }
    let cls = g.bce_with_logits(pass.cls_logit, Tensor::scalar(cls_target as f64));
    let seg_ai = g.bce_with_logits(pass.mask_ai, mask_ai.clone());
    let seg_ma = g.bce_with_logits(pass.mask_ma, mask_ma.clone());
    let terms = [
        g.scale(cls, weights.w_cls),
        g.scale(seg_ai, weights.w_seg_ai),
        g.scale(seg_ma, weights.w_seg_ma),
    ];
    let partial = g.add(terms[0], terms[1]);
    let total = g.add(partial, terms[2]);
    Ok(LossGraph {
        cls,
        seg_ai,
        seg_ma,
        total,
    })
}

/// Loss, gradients and classification outcome of one training sample.
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub losses: LossParts,
    pub grads: Gradients,
    pub cls_logit: f64,
    pub cls_target: u8,
}

/// Forward and backward pass for one sample.
pub fn sample_gradients(model: &Model, sample: &Prepared, cls_target: u8, weights: &LossWeights) -> Result<SampleGrad> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, &sample.image)?;
    let lg = loss_graph(&mut g, &pass, cls_target, &sample.mask_ai, &sample.mask_mani, weights)?;
    let losses = LossParts {
        cls: g.value(lg.cls).item(),
        seg_ai: g.value(lg.seg_ai).item(),
        seg_ma: g.value(lg.seg_ma).item(),
        total: g.value(lg.total).item(),
    };
    let grads = if losses.all_finite() {
        g.backward(lg.total, model.params())
    } else {
        Gradients::zeros_like(model.params())
    };
    Ok(SampleGrad {
        losses,
        grads,
        cls_logit: g.value(pass.cls_logit).item(),
        cls_target,
    })
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub losses: LossParts,
    pub correct: usize,
    pub samples: usize,
}

/// Mean metrics of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub samples: usize,
    pub loss: LossParts,
    pub train_accuracy: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub samples: usize,
    pub loss_total: f64,
    pub loss_cls: f64,
    pub loss_seg_ai: f64,
    pub loss_seg_ma: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub best: bool,
}

/// Model, optimizer state and schedule of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Model,
    optimizer: Adam,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adam::new(
            model.params(),
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_eps,
        );
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// One optimizer step on the mean loss of `batch`.
    ///
    /// Per-sample gradients may be computed on several threads; they are
    /// summed in batch order so the update does not depend on the thread
    /// count. `epoch` and `batch_index` only label diagnostics.
    pub fn step(&mut self, batch: &[Prepared], epoch: usize, batch_index: usize) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        let weights = self.config.loss_weights;
        let model = &self.model;
        let config = &self.config;
        let results = map_indexed(config.workers, batch.len(), |i| {
            sample_gradients(model, &batch[i], config.cls_target(&batch[i]), &weights)
        })?;
        let parts: Vec<LossParts> = results.iter().map(|r| r.losses).collect();
        let mean = LossParts::mean(&parts);
        let non_finite = |m: LossParts| Error::NonFinite {
            epoch,
            batch: batch_index,
            cls: m.cls,
            seg_ai: m.seg_ai,
            seg_ma: m.seg_ma,
        };
        if !mean.all_finite() {
            return Err(non_finite(mean));
        }
        let mut grads = Gradients::zeros_like(self.model.params());
        for r in &results {
            grads.accumulate(&r.grads);
        }
        grads.scale(1.0 / batch.len() as f64);
        if !grads.all_finite() {
            return Err(non_finite(mean));
        }
        self.optimizer.update(self.model.params_mut(), &grads);
        let correct = results
            .iter()
            .filter(|r| u8::from(r.cls_logit >= 0.0) == r.cls_target)
            .count();
        Ok(StepMetrics {
            losses: mean,
            correct,
            samples: batch.len(),
        })
    }

    /// Trains on the `(seed, epoch)` subsample of `manifest` in batches.
    pub fn train_epoch(&mut self, manifest: &Manifest, data: &DataConfig, epoch: usize) -> Result<EpochMetrics> {
        let subset = datapipe::epoch_subsample(manifest, self.config.epoch_fraction, self.config.seed, epoch as u64)?;
        let epoch_seed = mix(self.config.seed ^ 0x5EED_DA7A, epoch as u64);
        let mut parts = Vec::new();
        let (mut correct, mut samples) = (0, 0);
        let batches: Vec<&[_]> = subset.records.chunks(self.config.batch_size).collect();
        for (b, records) in batches.into_iter().enumerate() {
            let chunk = Manifest::new(subset.root.clone(), records.to_vec());
            let prepared = datapipe::prepare(&chunk, data, true, mix(epoch_seed, b as u64), self.config.workers)?;
            let m = self.step(&prepared, epoch, b)?;
            parts.push(m.losses);
            correct += m.correct;
            samples += m.samples;
        }
        // Batches differ in size only at the tail; weight by sample count.
        let sizes: Vec<usize> = subset.records.chunks(self.config.batch_size).map(<[_]>::len).collect();
        let mut loss = LossParts::default();
        for (p, &n) in parts.iter().zip(&sizes) {
            let w = n as f64 / samples as f64;
            loss.cls += w * p.cls;
            loss.seg_ai += w * p.seg_ai;
            loss.seg_ma += w * p.seg_ma;
            loss.total += w * p.total;
        }
        Ok(EpochMetrics {
            epoch,
            steps: parts.len(),
            samples,
            loss,
            train_accuracy: correct as f64 / samples as f64,
        })
    }

    /// Classification accuracy on `manifest` (center crops, no augmentation),
    /// with the configured label overrides.
    pub fn validation_accuracy(&self, manifest: &Manifest, data: &DataConfig) -> Result<f64> {
        let prepared = datapipe::prepare(manifest, data, false, 0, self.config.workers)?;
        let logits = evalkit::cls_logits(&self.model, &prepared, self.config.workers)?;
        let preds: Vec<u8> = logits.iter().map(|&l| evalkit::decide(l)).collect();
        let labels: Vec<u8> = prepared.iter().map(|p| self.config.cls_target(p)).collect();
        evalkit::accuracy(&preds, &labels)
    }

    /// Runs epochs until early stopping or `max_epochs`.
    ///
    /// Validation accuracy drives early stopping; an empty validation
    /// manifest falls back to training accuracy. `observer` sees every epoch
    /// record together with the current model.
    pub fn fit(
        &mut self,
        train: &Manifest,
        val: &Manifest,
        data: &DataConfig,
        observer: &mut dyn FnMut(&EpochRecord, &Model) -> Result<()>,
    ) -> Result<FitSummary> {
        let mut history = Vec::new();
        let mut records = Vec::new();
        let mut best = f64::NEG_INFINITY;
        let mut stopped_early = false;
        for epoch in 1..=self.config.max_epochs {
            let m = self.train_epoch(train, data, epoch)?;
            let val_accuracy = if val.is_empty() {
                m.train_accuracy
            } else {
                self.validation_accuracy(val, data)?
            };
            let is_best = val_accuracy > best;
            if is_best {
                best = val_accuracy;
            }
            let record = EpochRecord {
                epoch,
                steps: m.steps,
                samples: m.samples,
                loss_total: m.loss.total,
                loss_cls: m.loss.cls,
                loss_seg_ai: m.loss.seg_ai,
                loss_seg_ma: m.loss.seg_ma,
                train_accuracy: m.train_accuracy,
                val_accuracy,
                best: is_best,
            };
            observer(&record, &self.model)?;
            records.push(record);
            history.push(val_accuracy);
            if early_stop_check(&history, self.config.early_stop_delta, self.config.early_stop_patience)?
                == StopDecision::Stop
            {
                stopped_early = true;
                break;
            }
        }
        Ok(FitSummary {
            epochs: records,
            best_val_accuracy: best,
            stopped_early,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_val_accuracy: f64,
    pub stopped_early: bool,
}

/// Writes `metrics.jsonl`, per-epoch checkpoints and `best.ckpt` under a
/// run directory.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    metadata: BTreeMap<String, String>,
}

impl RunWriter {
    pub const METRICS_FILE: &'static str = "metrics.jsonl";
    pub const BEST_CHECKPOINT: &'static str = "best.ckpt";

    pub fn create(dir: impl AsRef<Path>, metadata: BTreeMap<String, String>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(dir.join("checkpoints"))?;
        let metrics = BufWriter::new(File::create(dir.join(Self::METRICS_FILE))?);
        Ok(Self { dir, metrics, metadata })
    }

    pub fn checkpoint_path(&self, epoch: usize) -> PathBuf {
        self.dir.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"))
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join(Self::BEST_CHECKPOINT)
    }

    pub fn record(&mut self, record: &EpochRecord, model: &Model) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        self.metrics.flush()?;
        let mut metadata = self.metadata.clone();
        metadata.insert("epoch".into(), record.epoch.to_string());
        metadata.insert("val_accuracy".into(), record.val_accuracy.to_string());
        let bytes = encode_checkpoint(model, &metadata)?;
        fs::write(self.checkpoint_path(record.epoch), &bytes)?;
        if record.best {
            fs::write(self.best_path(), &bytes)?;
        }
        Ok(())
    }
}
