// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML file with dotted sections, plus `key=value`
//! overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{Aggregation, Method};
use crate::error::{Error, Result};
use crate::interactions::{PromptTemplate, SplitConfig, SynthConfig};
use crate::model::{ModelConfig, TrainConfig};
use crate::ppr::{CorruptConfig, PprConfig};
use crate::unlearn::UnlearnConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synth,
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub rating_threshold: f64,
    pub has_header: bool,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synth, path: None, rating_threshold: 3.0, has_header: false, synth: SynthConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub method: Method,
    pub aggregation: Aggregation,
    /// Share of DAG edges kept in each circuit.
    pub circuit_fraction: f64,
    /// Extract one circuit per sample and take their union instead of one
    /// circuit from the aggregated scores.
    pub per_sample_union: bool,
    /// Cap on scored samples per set (0 = all).
    pub max_samples: usize,
    /// Abort when corrupt-sample construction fails for more than this share.
    pub max_corrupt_failure: f64,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            method: Method::Intervention,
            aggregation: Aggregation::Mean,
            circuit_fraction: 0.05,
            per_sample_union: false,
            max_samples: 0,
            max_corrupt_failure: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, overrides every section seed.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub template: PromptTemplate,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
    pub ppr: PprConfig,
    pub corrupt: CorruptConfig,
    pub unlearn: UnlearnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            threads: None,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            template: PromptTemplate::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig { epochs: 12, ..TrainConfig::default() },
            attribution: AttributionConfig::default(),
            ppr: PprConfig::default(),
            corrupt: CorruptConfig::default(),
            unlearn: UnlearnConfig::default(),
        }
    }
}

/// Parses a scalar override; anything that is not valid TOML is a string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Builds a config from TOML text and `key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: RunConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the top-level seed into every section.
    pub fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.data.synth.seed = s;
            self.split.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.unlearn.seed = s;
        }
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Tsv {
            match &self.data.path {
                None => return Err(Error::Config("data.path is required when data.source = \"tsv\"".into())),
                Some(p) if !p.exists() => {
                    return Err(Error::Config(format!("data.path {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        let [a, b, c] = self.split.ratios;
        if [a, b, c].iter().any(|r| !(*r >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split.ratios must be non-negative and sum to 1, got {:?}", self.split.ratios)));
        }
        if !(self.split.forget_fraction >= 0.0 && self.split.forget_fraction < 1.0) {
            return Err(Error::Config(format!("split.forget_fraction must lie in [0, 1), got {}", self.split.forget_fraction)));
        }
        let f = self.attribution.circuit_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("attribution.circuit_fraction must lie in (0, 1], got {f}")));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        self.ppr.validate()?;
        self.unlearn.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.unlearn.omega_r, 0.6);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml("[unlearn]\nomega = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("omega"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn overrides_and_seed() {
        let c = RunConfig::from_toml_with(
            "seed = 7\n[unlearn]\nlr = 0.1\n",
            &["unlearn.lr=0.002".into(), "attribution.method=patching".into(), "data.synth.num_users=30".into()],
        )
        .unwrap();
        assert_eq!(c.unlearn.lr, 0.002);
        assert_eq!(c.attribution.method, Method::Patching);
        assert_eq!(c.data.synth.num_users, 30);
        assert_eq!((c.split.seed, c.model.seed, c.unlearn.seed), (7, 7, 7));
    }

    #[test]
    fn missing_tsv_path_names_field() {
        let err = RunConfig::from_toml("[data]\nsource = \"tsv\"\n").unwrap_err();
        assert!(err.to_string().contains("data.path"));
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
