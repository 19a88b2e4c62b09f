//! Resolved run configuration: flags first, then the config file on top.

use std::fs;
use std::path::{Path, PathBuf};

use gamma_core::datapipe::{DataConfig, Split};
use gamma_core::evalkit::{ReportFormat, DEFAULT_QUALITIES};
use gamma_core::forge::{ForgeOp, ForgeOptions, DEFAULT_JPEG_QUALITY};
use gamma_core::model::ModelConfig;
use gamma_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// File every command writes into its output directory.
pub const SNAPSHOT_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeSection {
    /// Directory of authentic source images; `None` means synthetic sources.
    pub input_dir: Option<PathBuf>,
    /// Number of synthetic sources when no input directory is given.
    pub synthetic: usize,
    /// Samples to produce; defaults to the number of sources.
    pub count: Option<usize>,
    /// Width and height of synthetic sources.
    pub size: [u32; 2],
    /// Ops are assigned round-robin over the samples.
    pub ops: Vec<ForgeOp>,
    /// Per-category fraction moved to the test split.
    pub test_fraction: f64,
    pub options: ForgeOptions,
}

impl Default for ForgeSection {
    fn default() -> Self {
        Self {
            input_dir: None,
            synthetic: 0,
            count: None,
            size: [64, 64],
            ops: vec![ForgeOp::Real, ForgeOp::Inpaint, ForgeOp::Blend, ForgeOp::CopyMove, ForgeOp::Splice],
            test_fraction: 0.0,
            options: ForgeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Re-encode evaluation images as JPEG at `jpeg_quality` before cropping.
    pub format_align: bool,
    pub jpeg_quality: u8,
    /// Robustness qualities; empty skips the sweep.
    pub qualities: Vec<u8>,
    pub formats: Vec<ReportFormat>,
    /// Restrict evaluation to one split; `None` uses every record.
    pub split: Option<Split>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            format_align: true,
            jpeg_quality: DEFAULT_JPEG_QUALITY,
            qualities: Vec::new(),
            formats: ReportFormat::ALL.to_vec(),
            split: None,
        }
    }
}

impl EvalSection {
    pub fn default_sweep() -> Vec<u8> {
        DEFAULT_QUALITIES.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Grid keys, optionally narrowed to one cell with `key=cell`.
    pub grids: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            grids: ["heads", "labels", "loss", "attention"].map(String::from).to_vec(),
        }
    }
}

/// Everything a command needs. The snapshot of this struct plus the seed
/// determines a run's outputs at one worker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub command: String,
    /// Single seed for model initialization, forging and data order; it
    /// replaces `train.seed` and `forge.options.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub config_path: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub forge: ForgeSection,
    pub eval: EvalSection,
    pub ablate: AblateSection,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            output_dir: PathBuf::from("."),
            config_path: None,
            manifest: None,
            checkpoint: None,
            model: ModelConfig::toy(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            forge: ForgeSection::default(),
            eval: EvalSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl Settings {
    /// Applies the config file named in `config_path`, if any, over these
    /// flag-derived settings, then validates.
    pub fn resolve(self) -> Result<Settings, Failure> {
        let mut table = toml::Table::try_from(&self).map_err(|e| Failure::usage(format!("settings: {e}")))?;
        if let Some(path) = &self.config_path {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: toml::Table =
                text.parse().map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
            merge(&mut table, overlay);
        }
        let mut resolved: Settings = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Failure::usage(format!("config: {e}")))?;
        resolved.train.seed = resolved.seed;
        resolved.forge.options.seed = resolved.seed;
        resolved.model.validate()?;
        resolved.train.validate()?;
        Ok(resolved)
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::usage(format!("settings: {e}")))
    }

    /// Writes the resolved-config snapshot into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir).map_err(Failure::io)?;
        fs::write(dir.join(SNAPSHOT_FILE), self.to_toml()?).map_err(Failure::io)
    }

    pub fn read_snapshot(path: &Path) -> Result<Settings, Failure> {
        let text = fs::read_to_string(path).map_err(Failure::io)?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn require_manifest(&self) -> Result<&Path, Failure> {
        self.manifest.as_deref().ok_or_else(|| Failure::usage("a manifest is required"))
    }
}
