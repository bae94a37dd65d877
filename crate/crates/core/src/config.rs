//! Run configuration: one TOML file, dotted `key=value` overrides, validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::SimConfig;
use crate::error::{Error, Result};
use crate::eval::latency::{DEFAULT_RUNS, DEFAULT_WARMUP};
use crate::frontend::{RareClassFilter, SoundingConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// UE sequences generated before rare-class filtering.
    pub num_sequences: usize,
    /// Target beams seen in fewer than this fraction of records are dropped.
    pub min_class_fraction: f64,
    /// Absolute threshold; takes precedence over the fraction when set.
    pub min_class_count: Option<usize>,
    /// Dataset directory; defaults to `<output_dir>/data`.
    pub dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_sequences: 4000,
            min_class_fraction: 0.011,
            min_class_count: None,
            dir: None,
        }
    }
}

impl DataConfig {
    pub fn filter(&self) -> RareClassFilter {
        match self.min_class_count {
            Some(n) => RareClassFilter::MinCount(n),
            None => RareClassFilter::Fraction(self.min_class_fraction),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub latency_warmup: usize,
    pub latency_runs: usize,
    /// Benchmark every ablation and sweep row as well.
    pub experiment_latency: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            latency_warmup: DEFAULT_WARMUP,
            latency_runs: DEFAULT_RUNS,
            experiment_latency: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub sounding: SoundingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            sim: SimConfig::default(),
            sounding: SoundingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `section.key=value` to a parsed document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let (last, tables) = parts.split_last().expect("non-empty");
    let mut cur = doc;
    for p in tables {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}': '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies overrides in order and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = doc.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) with overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p.to_path_buf()),
                _ => Error::io(p, e),
            })?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.sounding.n_rf_chains == 0 || self.sounding.wide_beam_group == 0 {
            return Err(Error::Config("sounding.n_rf_chains and sounding.wide_beam_group must be positive".into()));
        }
        if self.sim.num_antennas % self.sounding.wide_beam_group != 0 {
            return Err(Error::GroupSize {
                group: self.sounding.wide_beam_group,
                antennas: self.sim.num_antennas,
            });
        }
        if !(self.sounding.tx_power_mw > 0.0) {
            return Err(Error::Config("sounding.tx_power_mw must be positive".into()));
        }
        if self.data.num_sequences == 0 {
            return Err(Error::Config("data.num_sequences must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.min_class_fraction) {
            return Err(Error::Config("data.min_class_fraction must lie in [0, 1)".into()));
        }
        if self.eval.latency_runs == 0 {
            return Err(Error::Config("eval.latency_runs must be positive".into()));
        }
        self.train.validate()?;
        let beams = self.sounding.codebook_size(self.sim.num_antennas);
        let dims = crate::frontend::Dims {
            frames: self.sim.observed_slots(),
            subcarriers: self.sim.num_subcarriers,
            beams,
        };
        self.model.resolve(dims, beams).map(|_| ())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.output_dir.join("data"))
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.bin"))
    }
}
