//! Run configuration: one JSON file drives every stage. A bare space config
//! (a file with a `stages` key) is accepted too and runs with defaults.

use anyhow::{bail, Context, Result};
use nas_core::evolve::SearchConfig;
use nas_core::latsim::DeviceProfile;
use nas_core::space::load_space;
use nas_core::supernet::{DatasetConfig, FinetuneConfig, TrainConfig};
use nas_core::surrogate::{SurrogateHyper, SurrogateKind};
use nas_core::SpaceSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpaceRef {
    Path(PathBuf),
    Inline(SpaceSpec),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindChoice {
    Auto,
    Fixed(SurrogateKind),
}

impl FromStr for KindChoice {
    type Err = nas_core::Error;
    fn from_str(s: &str) -> nas_core::Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(KindChoice::Auto)
        } else {
            s.parse().map(KindChoice::Fixed)
        }
    }
}

impl Serialize for KindChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KindChoice::Auto => s.serialize_str("auto"),
            KindChoice::Fixed(k) => k.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for KindChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    /// Distinct architectures measured per device.
    pub samples: usize,
    /// Externally measured CSV used instead of the simulator.
    pub import: Option<PathBuf>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            samples: 3000,
            import: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub kind: KindChoice,
    pub hyper: SurrogateHyper,
    /// Training-set sizes for the sample-efficiency sweep; empty skips it.
    pub sweep: Vec<usize>,
    pub sweep_seeds: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kind: KindChoice::Auto,
            hyper: SurrogateHyper::default(),
            sweep: vec![],
            sweep_seeds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    /// Random architectures finetuned for the inherited-vs-finetuned report.
    pub archs: usize,
    pub finetune: FinetuneConfig,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            archs: 20,
            finetune: FinetuneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Path (relative to the config file) or inline space; the desk space
    /// when absent.
    pub space: Option<SpaceRef>,
    /// Global seed; overrides the seeds of the training, finetuning,
    /// latency, surrogate and search sections. The dataset keeps its own.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub consistency: ConsistencyConfig,
    pub devices: Vec<DeviceProfile>,
    pub latency: LatencyConfig,
    pub surrogate: SurrogateConfig,
    pub search: SearchConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space: None,
            seed: 0,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            consistency: ConsistencyConfig::default(),
            devices: DeviceProfile::presets(),
            latency: LatencyConfig::default(),
            surrogate: SurrogateConfig::default(),
            search: SearchConfig::default(),
            out: PathBuf::from("run"),
        }
    }
}

/// A loaded and validated configuration with its space resolved.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub cfg: RunConfig,
    pub spec: SpaceSpec,
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        nas_core::Error::Parse {
            key,
            msg: format!("{} ({})", e.inner(), path.display()),
        }
        .into()
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Loads `path` (run config or bare space config), or the defaults.
pub fn load(path: Option<&Path>) -> Result<Resolved> {
    let Some(path) = path else {
        return resolve(RunConfig::default(), Path::new("."));
    };
    let text = read(path)?;
    let value: serde_json::Value = parse_json(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let cfg = if value.get("stages").is_some() {
        RunConfig {
            space: Some(SpaceRef::Path(
                path.file_name().map(PathBuf::from).unwrap_or_default(),
            )),
            ..Default::default()
        }
    } else {
        parse_json(&text, path)?
    };
    resolve(cfg, base)
}

fn resolve(mut cfg: RunConfig, base: &Path) -> Result<Resolved> {
    let spec = match &cfg.space {
        None => SpaceSpec::desk(),
        Some(SpaceRef::Inline(s)) => {
            s.validate()?;
            s.clone()
        }
        Some(SpaceRef::Path(p)) => {
            let p = base.join(p);
            let spec = load_space(&read(&p)?)?;
            cfg.space = Some(SpaceRef::Path(p));
            spec
        }
    };
    if let Some(p) = &cfg.latency.import {
        let p = base.join(p);
        if !p.is_file() {
            bail!(nas_core::Error::Config(format!(
                "latency import file {} does not exist",
                p.display()
            )));
        }
        cfg.latency.import = Some(p);
    }
    cfg.apply_seed(cfg.seed);
    let r = Resolved { cfg, spec };
    r.validate()?;
    Ok(r)
}

impl RunConfig {
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.consistency.finetune.seed = seed;
        self.search.seed = seed;
    }
}

impl Resolved {
    pub fn validate(&self) -> Result<()> {
        let c = &self.cfg;
        let d = &c.dataset;
        if d.length != self.spec.max_resolution() || d.n_classes != self.spec.n_classes {
            bail!(nas_core::Error::Config(format!(
                "dataset length/classes ({}, {}) must match the space's largest resolution and class count ({}, {})",
                d.length,
                d.n_classes,
                self.spec.max_resolution(),
                self.spec.n_classes
            )));
        }
        c.train.validate()?;
        c.search.validate()?;
        for dev in &c.devices {
            dev.validate()?;
        }
        if c.latency.samples == 0 {
            bail!(nas_core::Error::Config(
                "latency.samples must be positive".into()
            ));
        }
        if c.consistency.archs == 0 {
            bail!(nas_core::Error::Config(
                "consistency.archs must be positive".into()
            ));
        }
        Ok(())
    }

    pub fn device(&self, name: &str) -> Option<&DeviceProfile> {
        self.cfg.devices.iter().find(|d| d.name == name)
    }
}
