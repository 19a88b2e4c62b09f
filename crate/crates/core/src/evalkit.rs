//! Classification and mask metrics, JPEG robustness sweeps and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::sigmoid;
use crate::datapipe::{center_crop, DataConfig, Manifest, Prepared};
use crate::error::{Error, Result};
use crate::forge::{self, SourceCategory, DEFAULT_JPEG_QUALITY};
use crate::model::Model;
use crate::parallel::map_indexed;
use crate::tensor::Tensor;

/// JPEG qualities of the default robustness sweep.
pub const DEFAULT_QUALITIES: [u8; 7] = [100, 96, 90, 80, 70, 60, 50];

/// Probability threshold for image-level and pixel-level decisions.
pub const THRESHOLD: f64 = 0.5;

/// Full-scale reference figures quoted in report headers. They need the
/// full training corpus and pretrained weights and are not reproduced here.
pub const REFERENCE_NOTES: [&str; 2] = [
    "reference (full scale, not reproduced here): GenImage average accuracy 95.1%",
    "reference (full scale, not reproduced here): +5.8% accuracy over the prior best; the introduction states 5.4%",
];

/// Image-level decision at [`THRESHOLD`].
pub fn decide(logit: f64) -> u8 {
    u8::from(sigmoid(logit) >= THRESHOLD)
}

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("accuracy of zero predictions".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Pixel confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl SegCounts {
    pub fn from_logits(logits: &Tensor, target: &Tensor, threshold: f64) -> Result<Self> {
        let shapes_clash = logits.shape().len() > 1 && target.shape().len() > 1 && logits.shape() != target.shape();
        if logits.len() != target.len() || shapes_clash {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?}",
                logits.shape(),
                target.shape()
            )));
        }
        let mut c = SegCounts::default();
        for (&l, &t) in logits.data().iter().zip(target.data()) {
            match (sigmoid(l) >= threshold, t != 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: &SegCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// F1 and IoU of the positive class; both are 1 when prediction and
    /// target are empty.
    pub fn scores(&self) -> SegScores {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            return SegScores { f1: 1.0, iou: 1.0 };
        }
        let tp = self.tp as f64;
        SegScores {
            f1: 2.0 * tp / (2.0 * tp + (self.fp + self.fn_) as f64),
            iou: tp / union as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub f1: f64,
    pub iou: f64,
}

/// Pixel F1 and IoU of one logit map against a binary mask.
pub fn seg_metrics(logits: &Tensor, target: &Tensor, threshold: f64) -> Result<SegScores> {
    Ok(SegCounts::from_logits(logits, target, threshold)?.scores())
}

/// Classification logits for prepared samples, in order.
pub fn cls_logits(model: &Model, samples: &[Prepared], workers: usize) -> Result<Vec<f64>> {
    map_indexed(workers, samples.len(), |i| Ok(model.predict(&samples[i].image)?.cls_logit))
}

/// Per-image evaluation outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    pub cls_logit: f64,
    pub label: u8,
    pub category: SourceCategory,
    pub source: String,
    pub ai: SegCounts,
    pub mani: SegCounts,
}

impl SampleEval {
    pub fn correct(&self) -> bool {
        decide(self.cls_logit) == self.label
    }
}

/// Evaluates one prepared sample.
pub fn evaluate_sample(model: &Model, sample: &Prepared, source: &str) -> Result<SampleEval> {
    let p = model.predict(&sample.image)?;
    Ok(SampleEval {
        cls_logit: p.cls_logit,
        label: sample.cls,
        category: sample.category,
        source: source.to_string(),
        ai: SegCounts::from_logits(&p.mask_ai_logits, &sample.mask_ai, THRESHOLD)?,
        mani: SegCounts::from_logits(&p.mask_ma_logits, &sample.mask_mani, THRESHOLD)?,
    })
}

/// Evaluation-time preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub data: DataConfig,
    /// JPEG quality every evaluation image is re-encoded at before
    /// cropping; `None` skips re-encoding.
    pub jpeg_quality: Option<u8>,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            jpeg_quality: Some(DEFAULT_JPEG_QUALITY),
            workers: 1,
        }
    }
}

/// Loads record `index`, re-encodes it at `quality` if given, and
/// center-crops it.
pub fn load_for_eval(manifest: &Manifest, index: usize, data: &DataConfig, quality: Option<u8>) -> Result<Prepared> {
    let mut sample = manifest.load_sample(index)?;
    if let Some(q) = quality {
        sample.image = forge::jpeg_roundtrip(&sample.image, q)?;
    }
    Ok(Prepared::from_sample(&center_crop(&sample, data.crop_size, data.pad)))
}

/// Evaluates every record of `manifest`, in order.
pub fn evaluate_manifest(model: &Model, manifest: &Manifest, config: &EvalConfig) -> Result<Vec<SampleEval>> {
    map_indexed(config.workers, manifest.len(), |i| {
        let sample = load_for_eval(manifest, i, &config.data, config.jpeg_quality)?;
        evaluate_sample(model, &sample, manifest.records[i].source_name())
    })
}

/// Accuracy after re-encoding every image at each quality, in input order.
pub fn robustness_sweep(
    model: &Model,
    manifest: &Manifest,
    config: &EvalConfig,
    qualities: &[u8],
) -> Result<Vec<(u8, f64)>> {
    if manifest.is_empty() {
        return Err(Error::Empty("robustness sweep over an empty manifest".into()));
    }
    if let Some(&q) = qualities.iter().find(|&&q| !(1..=100).contains(&q)) {
        return Err(Error::InvalidArgument(format!("JPEG quality {q} outside [1, 100]")));
    }
    qualities
        .iter()
        .map(|&q| {
            let cfg = EvalConfig {
                jpeg_quality: Some(q),
                ..config.clone()
            };
            let evals = evaluate_manifest(model, manifest, &cfg)?;
            let correct = evals.iter().filter(|e| e.correct()).count();
            Ok((q, correct as f64 / evals.len() as f64))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceAccuracy {
    pub accuracy: f64,
    /// Images scored for this source, generated and authentic together.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_source: BTreeMap<String, SourceAccuracy>,
    pub overall_accuracy: f64,
    pub seg_f1_ai: f64,
    pub seg_f1_ma: f64,
    pub seg_iou_ai: f64,
    pub seg_iou_ma: f64,
    pub robustness_curve: Vec<(u8, f64)>,
}

impl EvalReport {
    /// Checks ratio ranges and that the overall accuracy is the
    /// sample-weighted mean of the per-source accuracies.
    pub fn validate(&self) -> Result<()> {
        let ratios = [
            self.overall_accuracy,
            self.seg_f1_ai,
            self.seg_f1_ma,
            self.seg_iou_ai,
            self.seg_iou_ma,
        ];
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !ratios.into_iter().all(in_unit)
            || !self.per_source.values().all(|s| in_unit(s.accuracy))
            || !self.robustness_curve.iter().all(|&(_, a)| in_unit(a))
        {
            return Err(Error::InvalidArgument("report ratio outside [0, 1]".into()));
        }
        let total: usize = self.per_source.values().map(|s| s.samples).sum();
        if total > 0 {
            let weighted: f64 = self.per_source.values().map(|s| s.accuracy * s.samples as f64).sum::<f64>() / total as f64;
            if (weighted - self.overall_accuracy).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "overall accuracy {} differs from weighted per-source mean {weighted}",
                    self.overall_accuracy
                )));
            }
        }
        Ok(())
    }
}

/// Groups evaluations by source with balanced authentic counterparts.
///
/// Every source of non-`Real` images is scored on `k` of its images plus `k`
/// authentic images, `k` being the smaller of the two counts, both taken in
/// manifest order. A source without authentic counterparts is scored on its
/// own images alone. When the evaluations hold only authentic images, each
/// authentic source is scored on its own. Mask metrics pool every
/// evaluation once.
pub fn build_report(evals: &[SampleEval], robustness_curve: Vec<(u8, f64)>) -> Result<EvalReport> {
    if evals.is_empty() {
        return Err(Error::Empty("report over zero evaluations".into()));
    }
    let reals: Vec<&SampleEval> = evals.iter().filter(|e| e.category == SourceCategory::Real).collect();
    let mut groups: BTreeMap<&str, Vec<&SampleEval>> = BTreeMap::new();
    let only_real = reals.len() == evals.len();
    for e in evals {
        if only_real || e.category != SourceCategory::Real {
            groups.entry(e.source.as_str()).or_default().push(e);
        }
    }
    let mut per_source = BTreeMap::new();
    let (mut correct_total, mut samples_total) = (0usize, 0usize);
    for (source, items) in groups {
        let scored: Vec<&SampleEval> = if only_real {
            items
        } else if reals.is_empty() {
            log::warn!("source `{source}` has no authentic counterparts; scoring its images alone");
            items
        } else {
            let k = items.len().min(reals.len());
            items[..k].iter().chain(&reals[..k]).copied().collect()
        };
        let correct = scored.iter().filter(|e| e.correct()).count();
        correct_total += correct;
        samples_total += scored.len();
        per_source.insert(
            source.to_string(),
            SourceAccuracy {
                accuracy: correct as f64 / scored.len() as f64,
                samples: scored.len(),
            },
        );
    }
    let (mut ai, mut mani) = (SegCounts::default(), SegCounts::default());
    for e in evals {
        ai.add(&e.ai);
        mani.add(&e.mani);
    }
    let (ai, mani) = (ai.scores(), mani.scores());
    let report = EvalReport {
        per_source,
        overall_accuracy: correct_total as f64 / samples_total as f64,
        seg_f1_ai: ai.f1,
        seg_f1_ma: mani.f1,
        seg_iou_ai: ai.iou,
        seg_iou_ma: mani.iou,
        robustness_curve,
    };
    report.validate()?;
    Ok(report)
}

/// Evaluates `manifest` and groups the outcome per source.
pub fn per_source_report(model: &Model, manifest: &Manifest, config: &EvalConfig) -> Result<EvalReport> {
    build_report(&evaluate_manifest(model, manifest, config)?, Vec::new())
}

/// Output kinds of [`emit_report`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Text,
    Delimited,
    Plot,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Text, ReportFormat::Delimited, ReportFormat::Plot];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Text => "report.txt",
            ReportFormat::Delimited => "report.tsv",
            ReportFormat::Plot => "robustness.svg",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "table" => Ok(ReportFormat::Text),
            "delimited" | "tsv" => Ok(ReportFormat::Delimited),
            "plot" | "svg" => Ok(ReportFormat::Plot),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

const METRICS: [&str; 5] = ["overall_accuracy", "seg_f1_ai", "seg_f1_ma", "seg_iou_ai", "seg_iou_ma"];

fn metric_values(r: &EvalReport) -> [f64; 5] {
    [r.overall_accuracy, r.seg_f1_ai, r.seg_f1_ma, r.seg_iou_ai, r.seg_iou_ma]
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() || name.contains(['\t', '|', '\n', '\r']) || name != name.trim() {
        return Err(Error::InvalidArgument(format!("source name `{name}` cannot be written to a report")));
    }
    Ok(())
}

/// Rows shared by the text and delimited layouts.
fn rows(r: &EvalReport) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for (name, v) in METRICS.iter().zip(metric_values(r)) {
        out.push(vec!["metric".into(), name.to_string(), v.to_string()]);
    }
    for (name, s) in &r.per_source {
        check_name(name)?;
        out.push(vec!["source".into(), name.clone(), s.accuracy.to_string(), s.samples.to_string()]);
    }
    for (q, a) in &r.robustness_curve {
        out.push(vec!["curve".into(), q.to_string(), a.to_string()]);
    }
    Ok(out)
}

fn from_rows(rows: impl IntoIterator<Item = (usize, Vec<String>)>) -> Result<EvalReport> {
    let bad = |line: usize, m: &str| Error::InvalidArgument(format!("report line {line}: {m}"));
    let num = |line: usize, s: &str| s.parse::<f64>().map_err(|_| bad(line, &format!("bad number `{s}`")));
    let mut metrics = BTreeMap::new();
    let mut report = EvalReport {
        per_source: BTreeMap::new(),
        overall_accuracy: 0.0,
        seg_f1_ai: 0.0,
        seg_f1_ma: 0.0,
        seg_iou_ai: 0.0,
        seg_iou_ma: 0.0,
        robustness_curve: Vec::new(),
    };
    for (line, f) in rows {
        match (f[0].as_str(), f.len()) {
            ("metric", 3) => {
                metrics.insert(f[1].clone(), num(line, &f[2])?);
            }
            ("source", 4) => {
                let samples = f[3].parse().map_err(|_| bad(line, "bad sample count"))?;
                report.per_source.insert(
                    f[1].clone(),
                    SourceAccuracy {
                        accuracy: num(line, &f[2])?,
                        samples,
                    },
                );
            }
            ("curve", 3) => {
                let q = f[1].parse().map_err(|_| bad(line, "bad quality"))?;
                report.robustness_curve.push((q, num(line, &f[2])?));
            }
            _ => return Err(bad(line, "unrecognized row")),
        }
    }
    let mut take = |name: &str| metrics.remove(name).ok_or_else(|| bad(0, &format!("missing metric {name}")));
    report.overall_accuracy = take("overall_accuracy")?;
    report.seg_f1_ai = take("seg_f1_ai")?;
    report.seg_f1_ma = take("seg_f1_ma")?;
    report.seg_iou_ai = take("seg_iou_ai")?;
    report.seg_iou_ma = take("seg_iou_ma")?;
    Ok(report)
}

fn header_lines(r: &EvalReport) -> Vec<String> {
    let mut lines: Vec<String> = REFERENCE_NOTES.iter().map(|s| s.to_string()).collect();
    if r.robustness_curve.is_empty() {
        lines.push("robustness curve is empty; plot omitted".into());
    }
    lines
}

/// Tab-separated layout; `#` lines are comments.
pub fn to_delimited(r: &EvalReport) -> Result<String> {
    let mut s = String::new();
    for line in header_lines(r) {
        writeln!(s, "# {line}").expect("string write");
    }
    for row in rows(r)? {
        writeln!(s, "{}", row.join("\t")).expect("string write");
    }
    Ok(s)
}

pub fn parse_delimited(text: &str) -> Result<EvalReport> {
    from_rows(
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
            .map(|(i, l)| (i + 1, l.split('\t').map(str::to_string).collect())),
    )
}

/// Human-readable table with `|` separated, space-padded columns.
pub fn to_text_table(r: &EvalReport) -> Result<String> {
    let rows = rows(r)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|row| row.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for line in header_lines(r) {
        writeln!(s, "# {line}").expect("string write");
    }
    for row in &rows {
        let cells: Vec<String> = row.iter().enumerate().map(|(c, v)| format!("{v:<w$}", w = widths[c])).collect();
        writeln!(s, "| {} |", cells.join(" | ")).expect("string write");
    }
    Ok(s)
}

pub fn parse_text_table(text: &str) -> Result<EvalReport> {
    from_rows(
        text.lines()
            .enumerate()
            .filter(|(_, l)| l.starts_with('|'))
            .map(|(i, l)| {
                let inner = l.trim().trim_start_matches('|').trim_end_matches('|');
                (i + 1, inner.split('|').map(|c| c.trim().to_string()).collect())
            }),
    )
}

/// SVG line chart of accuracy over JPEG quality.
pub fn robustness_svg(curve: &[(u8, f64)]) -> Result<String> {
    use plotters::prelude::*;

    if curve.is_empty() {
        return Err(Error::Empty("robustness curve".into()));
    }
    let plot_err = |e: String| Error::InvalidArgument(format!("plot: {e}"));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .margin(20)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0f64..100f64, 0f64..1f64)
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("JPEG quality")
            .y_desc("accuracy")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        let mut points: Vec<(f64, f64)> = curve.iter().map(|&(q, a)| (q as f64, a)).collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        chart
            .draw_series(LineSeries::new(points.clone(), &BLUE))
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .draw_series(points.into_iter().map(|p| Circle::new(p, 3, BLUE.filled())))
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    Ok(svg)
}

/// Writes `report` into `dir` in the given format and returns the file
/// written, or `None` for a plot of an empty curve.
pub fn emit_report(report: &EvalReport, format: ReportFormat, dir: impl AsRef<Path>) -> Result<Option<PathBuf>> {
    report.validate()?;
    let path = dir.as_ref().join(format.file_name());
    let contents = match format {
        ReportFormat::Text => to_text_table(report)?,
        ReportFormat::Delimited => to_delimited(report)?,
        ReportFormat::Plot if report.robustness_curve.is_empty() => return Ok(None),
        ReportFormat::Plot => robustness_svg(&report.robustness_curve)?,
    };
    fs::create_dir_all(dir.as_ref())?;
    fs::write(&path, contents)?;
    Ok(Some(path))
}
