//! Ablation grids: one training run and one evaluation per cell.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;

use gamma_core::datapipe::Manifest;
use gamma_core::model::FusionMode;
use gamma_core::trainer::LossWeights;
use gamma_core::SourceCategory;
use serde::{Deserialize, Serialize};

use crate::commands::{evaluate_model, load_manifest, splits, train_model};
use crate::settings::Settings;
use crate::Failure;

pub const RESULTS_TSV: &str = "ablation.tsv";
pub const RESULTS_TXT: &str = "ablation.txt";

/// Grid keys in the order they run.
pub const GRID_KEYS: [&str; 5] = ["heads", "labels", "datasets", "loss", "attention"];

/// What one cell changes relative to the base settings.
#[derive(Clone, Debug, PartialEq)]
pub enum Change {
    /// Zero the weight of the AI and/or manipulation mask loss.
    Heads { ai: bool, mani: bool },
    /// Train without blended inpaintings; `None` also drops copy-move and
    /// splicing, otherwise their classification labels are replaced.
    Labels(Option<(u8, u8)>),
    /// Train on authentic images plus these forged categories.
    Datasets(Vec<SourceCategory>),
    Loss(LossWeights),
    Attention(FusionMode),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub grid: &'static str,
    pub name: String,
    pub change: Change,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}-{}", self.grid, self.name)
    }

    /// Settings of this cell derived from `base`.
    pub fn apply(&self, base: &Settings) -> Settings {
        let mut s = base.clone();
        match &self.change {
            Change::Heads { ai, mani } => {
                if !ai {
                    s.train.loss_weights.w_seg_ai = 0.0;
                }
                if !mani {
                    s.train.loss_weights.w_seg_ma = 0.0;
                }
            }
            Change::Labels(Some((cm, sp))) => {
                s.train.cls_overrides.insert(SourceCategory::CopyMove, *cm);
                s.train.cls_overrides.insert(SourceCategory::Splicing, *sp);
            }
            Change::Labels(None) | Change::Datasets(_) => {}
            Change::Loss(w) => s.train.loss_weights = *w,
            Change::Attention(mode) => s.model.fusion = *mode,
        }
        s
    }

    /// Categories this cell trains on.
    pub fn training_categories(&self) -> BTreeSet<SourceCategory> {
        use SourceCategory::*;
        match &self.change {
            Change::Labels(None) => [Real, Inpaint].into(),
            Change::Labels(Some(_)) => [Real, Inpaint, CopyMove, Splicing].into(),
            Change::Datasets(cats) => std::iter::once(Real).chain(cats.iter().copied()).collect(),
            _ => SourceCategory::ALL.into_iter().collect(),
        }
    }
}

fn grid(key: &str) -> Option<Vec<Cell>> {
    use SourceCategory::*;
    let cell = |grid: &'static str, name: &str, change| Cell {
        grid,
        name: name.to_string(),
        change,
    };
    let cells = match key {
        "heads" => vec![
            cell("heads", "cls", Change::Heads { ai: false, mani: false }),
            cell("heads", "mani", Change::Heads { ai: false, mani: true }),
            cell("heads", "ai", Change::Heads { ai: true, mani: false }),
            cell("heads", "both", Change::Heads { ai: true, mani: true }),
        ],
        "labels" => {
            let mut v = vec![cell("labels", "none", Change::Labels(None))];
            for (cm, sp) in [(1, 1), (0, 1), (1, 0), (0, 0)] {
                v.push(cell("labels", &format!("{cm}-{sp}"), Change::Labels(Some((cm, sp)))));
            }
            v
        }
        "datasets" => vec![
            cell("datasets", "inpaint", Change::Datasets(vec![Inpaint])),
            cell("datasets", "inpaint+blended", Change::Datasets(vec![Inpaint, InpaintBlended])),
            cell("datasets", "inpaint+cmsp", Change::Datasets(vec![Inpaint, CopyMove, Splicing])),
            cell("datasets", "all", Change::Datasets(vec![Inpaint, InpaintBlended, CopyMove, Splicing])),
        ],
        "loss" => LossWeights::GRID
            .iter()
            .map(|w| cell("loss", &format!("{}-{}-{}", w.w_cls, w.w_seg_ai, w.w_seg_ma), Change::Loss(*w)))
            .collect(),
        "attention" => FusionMode::ALL
            .iter()
            .map(|&m| cell("attention", m.as_str(), Change::Attention(m)))
            .collect(),
        _ => return None,
    };
    Some(cells)
}

/// Expands grid specs such as `heads`, `labels` or `loss=2-2-1`.
pub fn expand(specs: &[String]) -> Result<Vec<Cell>, Failure> {
    let mut out = Vec::new();
    for spec in specs {
        let spec = spec.trim();
        let (key, pick) = match spec.split_once('=') {
            Some((k, c)) => (k.trim(), Some(c.trim())),
            None => (spec, None),
        };
        let cells = grid(key)
            .ok_or_else(|| Failure::usage(format!("unknown grid key `{key}`; expected one of {}", GRID_KEYS.join(", "))))?;
        match pick {
            None => out.extend(cells),
            Some(p) => {
                let names: Vec<String> = cells.iter().map(|c| c.name.clone()).collect();
                let c = cells
                    .into_iter()
                    .find(|c| c.name == p)
                    .ok_or_else(|| Failure::usage(format!("grid `{key}` has no cell `{p}`; cells: {}", names.join(", "))))?;
                out.push(c);
            }
        }
    }
    if out.is_empty() {
        return Err(Failure::usage("empty ablation grid"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub grid: String,
    pub cell: String,
    pub epochs: usize,
    pub best_val_accuracy: f64,
    pub accuracy: f64,
    pub seg_f1_ai: f64,
    pub seg_f1_ma: f64,
}

const COLUMNS: [&str; 7] = ["grid", "cell", "epochs", "best_val_accuracy", "accuracy", "seg_f1_ai", "seg_f1_ma"];

fn row(r: &CellResult) -> [String; 7] {
    [
        r.grid.clone(),
        r.cell.clone(),
        r.epochs.to_string(),
        format!("{:.4}", r.best_val_accuracy),
        format!("{:.4}", r.accuracy),
        format!("{:.4}", r.seg_f1_ai),
        format!("{:.4}", r.seg_f1_ma),
    ]
}

pub fn to_tsv(results: &[CellResult]) -> String {
    let mut s = COLUMNS.join("\t");
    s.push('\n');
    for r in results {
        s.push_str(&row(r).join("\t"));
        s.push('\n');
    }
    s
}

pub fn to_table(results: &[CellResult]) -> String {
    let rows: Vec<[String; 7]> = results.iter().map(row).collect();
    let widths: Vec<usize> = (0..7)
        .map(|c| rows.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: Vec<&str>| -> String {
        let padded: Vec<String> = cells.iter().enumerate().map(|(i, v)| format!("{v:<w$}", w = widths[i])).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut s = line(COLUMNS.to_vec());
    let _ = writeln!(s, "|{}|", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|"));
    for r in &rows {
        s.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    s
}

fn keep(m: &Manifest, cats: &BTreeSet<SourceCategory>) -> Manifest {
    m.filter(|r| cats.contains(&r.category))
}

/// Runs every cell. Cells train on the filtered train/val splits and are
/// all scored on the same evaluation set: the test split when the manifest
/// has one, otherwise the validation holdout.
pub fn run(settings: &Settings) -> Result<Vec<CellResult>, Failure> {
    let cells = expand(&settings.ablate.grids)?;
    let manifest = load_manifest(settings.require_manifest()?)?;
    settings.write_snapshot(&settings.output_dir)?;
    let (train, val, test) = splits(&manifest, settings);
    let eval_set = if test.is_empty() { val.clone() } else { test };
    let mut results = Vec::new();
    for cell in &cells {
        let s = cell.apply(settings);
        let dir = settings.output_dir.join("cells").join(cell.id());
        s.write_snapshot(&dir)?;
        let cats = cell.training_categories();
        log::info!("cell {}: training categories {:?}", cell.id(), cats);
        let outcome = train_model(&s, &keep(&train, &cats), &keep(&val, &cats), &dir)?;
        let report = evaluate_model(&s, &outcome.best, &eval_set, &dir)?;
        results.push(CellResult {
            grid: cell.grid.to_string(),
            cell: cell.name.clone(),
            epochs: outcome.summary.epochs.len(),
            best_val_accuracy: outcome.summary.best_val_accuracy,
            accuracy: report.overall_accuracy,
            seg_f1_ai: report.seg_f1_ai,
            seg_f1_ma: report.seg_f1_ma,
        });
    }
    fs::write(settings.output_dir.join(RESULTS_TSV), to_tsv(&results)).map_err(Failure::io)?;
    let table = to_table(&results);
    fs::write(settings.output_dir.join(RESULTS_TXT), &table).map_err(Failure::io)?;
    print!("{table}");
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(key: &str) -> Vec<String> {
        expand(&[key.to_string()]).unwrap().into_iter().map(|c| c.name).collect()
    }

    #[test]
    fn grids_have_the_expected_cells() {
        assert_eq!(names("heads"), ["cls", "mani", "ai", "both"]);
        assert_eq!(names("labels"), ["none", "1-1", "0-1", "1-0", "0-0"]);
        assert_eq!(names("datasets").len(), 4);
        assert_eq!(names("loss"), ["2-1-1", "2-3-1", "2-1-2", "2-2-1"]);
        assert_eq!(names("attention"), ["none", "forward", "dual", "reverse"]);
        assert_eq!(names("loss=2-3-1"), ["2-3-1"]);
    }

    #[test]
    fn unknown_keys_and_cells_are_usage_errors() {
        assert_eq!(expand(&["colour".into()]).unwrap_err().code, crate::EXIT_USAGE);
        assert_eq!(expand(&["loss=9-9-9".into()]).unwrap_err().code, crate::EXIT_USAGE);
        assert!(expand(&[]).is_err());
    }

    #[test]
    fn cells_change_only_their_knob() {
        let base = Settings::default();
        let cells = expand(&GRID_KEYS.map(String::from)).unwrap();
        for c in &cells {
            let s = c.apply(&base);
            let mut back = s.clone();
            back.train.loss_weights = base.train.loss_weights;
            back.train.cls_overrides = base.train.cls_overrides.clone();
            back.model.fusion = base.model.fusion;
            assert_eq!(back, base, "{}", c.id());
        }
        let heads = expand(&["heads=cls".into()]).unwrap();
        let w = heads[0].apply(&base).train.loss_weights;
        assert_eq!((w.w_cls, w.w_seg_ai, w.w_seg_ma), (2.0, 0.0, 0.0));
        let labels = expand(&["labels=0-1".into()]).unwrap();
        let o = labels[0].apply(&base).train.cls_overrides;
        assert_eq!((o[&SourceCategory::CopyMove], o[&SourceCategory::Splicing]), (0, 1));
        assert!(!labels[0].training_categories().contains(&SourceCategory::InpaintBlended));
    }
}
