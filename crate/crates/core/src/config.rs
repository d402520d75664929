//! Experiment configuration, read from TOML with strict key checking.
//!
//! ```toml
//! output_dir = "out"
//! runs = [0, 1, 2]
//!
//! [dataset]
//! classes_per_round = 4
//! schedule = "split_similar"
//!
//! [dataset.synthetic]
//! meta_classes = 2
//! # ...
//!
//! [model]
//! hidden = [64]
//!
//! [method]
//! method = "distill_old_plus_expert"
//! memory_k = 200
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SchedulePolicy, SyntheticSpec};
use crate::engine::{MethodConfig, RoundSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub train: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes_per_round: usize,
    pub schedule: SchedulePolicy,
    /// Generated benchmark. Each run uses `synthetic.seed + run seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// One run per seed.
    pub runs: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub method: MethodConfig,
    /// Write a parameter checkpoint after every round.
    #[serde(default)]
    pub checkpoints: bool,
}

fn field(path: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            field(&path, inner.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates; relative paths are anchored at the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| field("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let anchor = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        anchor(&mut cfg.output_dir);
        if let Some(csv) = cfg.dataset.csv.as_mut() {
            anchor(&mut csv.train);
            anchor(&mut csv.test);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(field("runs", "at least one seed is required"));
        }
        let mut seeds = self.runs.clone();
        seeds.sort_unstable();
        if seeds.windows(2).any(|w| w[0] == w[1]) {
            return Err(field("runs", "seeds must be distinct"));
        }
        if self.dataset.classes_per_round == 0 {
            return Err(field("dataset.classes_per_round", "must be >= 1"));
        }
        match (&self.dataset.synthetic, &self.dataset.csv) {
            (Some(s), None) => s
                .validate()
                .map_err(|e| field("dataset.synthetic", e.to_string()))?,
            (None, Some(_)) => {}
            _ => {
                return Err(field(
                    "dataset",
                    "exactly one of [dataset.synthetic] or [dataset.csv] is required",
                ))
            }
        }
        if self.model.hidden.contains(&0) {
            return Err(field("model.hidden", "hidden widths must be positive"));
        }
        self.method.validate().map_err(|e| match e {
            Error::Config { path, msg } => field(&format!("method.{path}"), msg),
            other => field("method", other.to_string()),
        })
    }

    /// Method settings for one run seed.
    pub fn method_for_seed(&self, seed: u64) -> MethodConfig {
        MethodConfig {
            seed,
            ..self.method.clone()
        }
    }

    /// Dataset and round schedule for one run seed.
    pub fn materialize(&self, seed: u64) -> Result<(Dataset, Vec<RoundSpec>)> {
        let dataset = match (&self.dataset.synthetic, &self.dataset.csv) {
            (Some(spec), _) => data::generate(&SyntheticSpec {
                seed: spec.seed.wrapping_add(seed),
                ..spec.clone()
            })?,
            (None, Some(csv)) => {
                Dataset::new(data::load_csv(&csv.train)?, data::load_csv(&csv.test)?)?
            }
            (None, None) => return Err(field("dataset", "no data source")),
        };
        let meta = dataset.meta_map()?;
        let rounds = data::schedule_rounds(
            &dataset.train,
            &meta,
            self.dataset.classes_per_round,
            self.dataset.schedule,
        )?;
        Ok((dataset, rounds))
    }
}
