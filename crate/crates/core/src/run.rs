//! End-to-end runs: configuration, run directories and report files.
//!
//! A run directory holds:
//!
//! | file               | contents                                         |
//! |--------------------|--------------------------------------------------|
//! | `config.json`      | resolved [`RunConfig`], written before training  |
//! | `base.lfck`        | frozen base model (quantized if requested)       |
//! | `adapters.lfck`    | trained adapters and classification head         |
//! | `metrics.csv`      | `epoch,loss,accuracy,weighted_f1` per epoch      |
//! | `history.json`     | full [`TrainHistory`]                            |
//! | `report.txt`       | final text report on the test split              |
//! | `report_metrics.csv`, `report_matrix.csv` | the same report as CSV  |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_adapters, load_model, save_adapters, save_model};
use crate::data::{load_csv, load_dataset, Dataset, Split, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_report, EvalReport, RenderedReport, ReportFormat};
use crate::lora::{inject_adapters, AdapterSpec};
use crate::model::{ModelConfig, TransformerModel};
use crate::quant::{Bits, DEFAULT_BLOCK_SIZE};
use crate::train::{train, TrainConfig, TrainHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantization {
    #[default]
    Off,
    Q8,
    Q4,
}

impl Quantization {
    pub fn bits(self) -> Option<Bits> {
        match self {
            Quantization::Off => None,
            Quantization::Q8 => Some(Bits::Eight),
            Quantization::Q4 => Some(Bits::Four),
        }
    }
}

impl std::str::FromStr for Quantization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(Self::Off),
            "q8" => Ok(Self::Q8),
            "q4" => Ok(Self::Q4),
            other => Err(Error::Config(format!("unknown quantization {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub adapter: AdapterSpec,
    pub train: TrainConfig,
    pub quantization: Quantization,
    pub quant_block_size: usize,
    /// Target max/min class ratio for training-split oversampling.
    pub oversample_ratio: Option<f64>,
    pub data: PathBuf,
    pub run_dir: PathBuf,
    /// Root seed; model, adapter and training seeds are derived from it.
    pub seed: u64,
    pub base_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Detection,
            model: ModelConfig::default(),
            adapter: AdapterSpec::default(),
            train: TrainConfig::default(),
            quantization: Quantization::Off,
            quant_block_size: DEFAULT_BLOCK_SIZE,
            oversample_ratio: None,
            data: PathBuf::from("data.jsonl"),
            run_dir: PathBuf::from("runs/latest"),
            seed: 0,
            base_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Fills in everything the task and root seed determine: class count,
    /// epoch count and component seeds.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.model.n_classes = c.task.n_classes();
        c.train.epochs = Some(c.train.epochs_for(c.task));
        c.model.seed = c.seed;
        c.adapter.seed = c.seed.wrapping_add(1);
        c.train.seed = c.seed.wrapping_add(2);
        c.model.validate()?;
        c.adapter.validate()?;
        c.train.validate(c.model.n_classes)?;
        if c.quant_block_size == 0 {
            return Err(Error::Config("quant_block_size must be positive".into()));
        }
        if let Some(r) = c.oversample_ratio {
            if !(r >= 1.0) {
                return Err(Error::Config("oversample_ratio must be at least 1".into()));
            }
        }
        Ok(c)
    }
}

/// Reads `.csv` through the CSV shim and anything else as JSON-Lines.
pub fn read_dataset(path: impl AsRef<Path>, task: Task) -> Result<Dataset> {
    let path = path.as_ref();
    let schema = task.schema();
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_csv(path, &schema)
    } else {
        load_dataset(path, &schema)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `<prefix>.txt`, `<prefix>_metrics.csv` and `<prefix>_matrix.csv`
/// into `dir` and returns their paths.
pub fn write_report(dir: &Path, prefix: &str, report: &EvalReport) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text_path = dir.join(format!("{prefix}.txt"));
    let metrics_path = dir.join(format!("{prefix}_metrics.csv"));
    let matrix_path = dir.join(format!("{prefix}_matrix.csv"));
    if let RenderedReport::Text(t) = render_report(report, ReportFormat::Text)? {
        write_file(&text_path, t)?;
    }
    if let RenderedReport::Csv { metrics, matrix } = render_report(report, ReportFormat::Csv)? {
        write_file(&metrics_path, metrics)?;
        write_file(&matrix_path, matrix)?;
    }
    Ok([text_path, metrics_path, matrix_path])
}

pub struct RunOutcome {
    pub config: RunConfig,
    pub model: TransformerModel<f32>,
    pub history: TrainHistory,
    pub report: EvalReport,
    pub report_split: Split,
}

/// Builds the adapted (and optionally quantized) model for `config`.
pub fn prepare_model(config: &RunConfig) -> Result<TransformerModel<f32>> {
    let base = match &config.base_checkpoint {
        Some(path) => {
            let m: TransformerModel<f32> = load_model(path)?;
            if m.config().n_classes != config.model.n_classes {
                return Err(Error::Mismatch(vec![format!(
                    "head.weight: base checkpoint has {} classes, {} task needs {}",
                    m.config().n_classes,
                    config.task,
                    config.model.n_classes
                )]));
            }
            if !m.adapters().is_empty() {
                return Err(Error::State("base checkpoint already carries adapters".into()));
            }
            m
        }
        None => TransformerModel::init(config.model.clone())?,
    };
    let mut model = inject_adapters(base, &config.adapter)?;
    if let Some(bits) = config.quantization.bits() {
        let n = model.quantize_frozen(bits, config.quant_block_size)?;
        log::info!("quantized {n} frozen matrices to {}", bits.tag());
    }
    Ok(model)
}

/// Frozen base of an adapted model, without adapters.
pub fn base_of(model: &TransformerModel<f32>) -> Result<TransformerModel<f32>> {
    let mut base = model.clone();
    base.set_adapters(Vec::new())?;
    Ok(base)
}

/// Trains per `config`, filling the run directory.
pub fn run_training(config: &RunConfig) -> Result<RunOutcome> {
    let config = config.resolved()?;
    let dir = &config.run_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.json"), serde_json::to_string_pretty(&config)?)?;

    let mut dataset = read_dataset(&config.data, config.task)?;
    if let Some(ratio) = config.oversample_ratio {
        dataset = dataset.with_oversampled_train(ratio, config.seed.wrapping_add(3))?;
    }
    let mut model = prepare_model(&config)?;
    save_model(dir.join("base.lfck"), &base_of(&model)?)?;

    let history = train(&mut model, &dataset, &config.train)?;
    save_adapters(dir.join("adapters.lfck"), &model, &config.adapter)?;
    write_file(&dir.join("metrics.csv"), history.metrics_csv())?;
    write_file(&dir.join("history.json"), serde_json::to_string_pretty(&history)?)?;

    let report_split = if dataset.split(Split::Test).is_empty() {
        Split::Valid
    } else {
        Split::Test
    };
    let examples = dataset.split(report_split);
    if examples.is_empty() {
        return Err(Error::Config("no test or validation examples to report on".into()));
    }
    let report = evaluate(&model, &examples, dataset.schema(), config.train.batch_size)?;
    write_report(dir, "report", &report)?;
    Ok(RunOutcome {
        config,
        model,
        history,
        report,
        report_split,
    })
}

/// Loads a base checkpoint and, if given, an adapter checkpoint on top.
pub fn load_adapted(
    base: impl AsRef<Path>,
    adapters: Option<&Path>,
) -> Result<(TransformerModel<f32>, Option<AdapterSpec>)> {
    let model: TransformerModel<f32> = load_model(base)?;
    match adapters {
        Some(path) => {
            let (m, spec) = load_adapters(path, model)?;
            Ok((m, Some(spec)))
        }
        None => Ok((model, None)),
    }
}
