//! File names, provenance stamps and (de)serialisation of run artifacts.

use anyhow::{Context, Result};
use nas_core::supernet::{gen_dataset, DatasetConfig, Split, SyntheticDataset};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DATASET: &str = "dataset.json";
pub const WEIGHTS: &str = "weights.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CONSISTENCY: &str = "consistency.json";
pub const LATENCY: &str = "latency.csv";
pub const SURROGATE_METRICS: &str = "surrogate_metrics.json";
pub const PARETO: &str = "pareto.json";
pub const HISTORY: &str = "history.csv";
pub const PARETO_SVG: &str = "pareto.svg";
pub const REPORT: &str = "report.md";

pub fn surrogate_file(device: &str) -> String {
    format!("surrogate_{device}.json")
}

pub fn sweep_file(device: &str) -> String {
    format!("sweep_{device}.csv")
}

/// Stamp carried by every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub space_hash: String,
    pub seed: u64,
    pub version: String,
    pub command: String,
}

impl Provenance {
    pub fn new(space_hash: String, seed: u64, command: &str) -> Self {
        Provenance {
            space_hash,
            seed,
            version: VERSION.into(),
            command: command.into(),
        }
    }

    /// `# key=value` header lines for CSV outputs.
    pub fn csv_meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("space_hash", self.space_hash.clone()),
            ("seed", self.seed.to_string()),
            ("version", self.version.clone()),
            ("command", self.command.clone()),
        ]
    }
}

pub fn csv_with_meta(meta: &[(&str, String)], body: &str) -> String {
    let mut out: String = meta.iter().map(|(k, v)| format!("# {k}={v}\n")).collect();
    out.push_str(body);
    out
}

/// JSON artifact: provenance next to the payload's own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub provenance: Provenance,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_json<T: Serialize>(path: &Path, provenance: &Provenance, body: &T) -> Result<()> {
    let doc = Stamped {
        provenance: provenance.clone(),
        body,
    };
    write(path, &serde_json::to_string_pretty(&doc)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Stamped<T>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        nas_core::Error::Parse {
            key: e.path().to_string(),
            msg: format!("{} ({})", e.inner(), path.display()),
        }
        .into()
    })
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitData {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub config: DatasetConfig,
    pub train: SplitData,
    pub val: SplitData,
}

impl DatasetFile {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let (train, val) = gen_dataset(cfg)?;
        let part = |d: SyntheticDataset| SplitData {
            inputs: d.inputs,
            labels: d.labels,
        };
        Ok(DatasetFile {
            config: cfg.clone(),
            train: part(train),
            val: part(val),
        })
    }

    pub fn splits(&self) -> Result<(SyntheticDataset, SyntheticDataset)> {
        let c = &self.config;
        let mk = |s: &SplitData, split| {
            SyntheticDataset::from_parts(
                s.inputs.clone(),
                s.labels.clone(),
                c.length,
                c.n_classes,
                split,
            )
        };
        Ok((mk(&self.train, Split::Train)?, mk(&self.val, Split::Val)?))
    }
}
