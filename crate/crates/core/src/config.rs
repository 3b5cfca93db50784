//! Run configuration files (TOML) and `key=value` overrides.
//!
//! Experiment settings sit at the top level next to `name`, `output_dir`,
//! `[data]` and `[split]`. Unknown keys anywhere are an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::orchestrator::{AblationMode, ExperimentConfig, Splits};

/// Environment variable naming the default directory for run outputs.
pub const RUN_ROOT_ENV: &str = "PB_RUN_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX image/label files. With `test_images`/`test_labels` the test set
    /// is taken from those files and the main files supply train and val.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        /// Swap rows and columns of every image (EMNIST files are stored transposed).
        #[serde(default)]
        transpose: bool,
        /// Keep a random subset of `limit` samples from each file, drawn
        /// with the split seed. File order is kept.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<Vec<String>>,
    },
    TwoSpirals {
        n_per_class: usize,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    XorQuadrants {
        n: usize,
        #[serde(default)]
        margin: f64,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::TwoSpirals {
            n_per_class: 200,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl DataConfig {
    /// Rewrites relative file paths as paths under `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataConfig::Idx {
                images,
                labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(images);
                fix(labels);
                test_images.iter_mut().chain(test_labels.iter_mut()).for_each(fix);
            }
            DataConfig::Csv { path, .. } => fix(path),
            _ => {}
        }
    }

    /// True when the source supplies its own test set.
    pub fn has_test_set(&self) -> bool {
        matches!(self, DataConfig::Idx { test_images: Some(_), .. })
    }

    /// Loads the data and partitions it into train, validation and test sets.
    pub fn load(&self, split: &SplitSpec) -> Result<Splits> {
        let three_way = |ds: Dataset| -> Result<Splits> {
            let (train, val, test) = data::split(&ds, split)?;
            Ok(Splits { train, val, test })
        };
        match self {
            DataConfig::Idx {
                images,
                labels,
                test_images,
                test_labels,
                transpose,
                limit,
            } => {
                let cap = |ds: Dataset| match limit {
                    Some(n) if *n < ds.len() => {
                        let mut rng = crate::seeds::rng_for(split.seed, &[crate::seeds::stream::SPLIT, 0x1137]);
                        let mut keep = rand::seq::index::sample(&mut rng, ds.len(), *n).into_vec();
                        keep.sort_unstable();
                        ds.subset(&keep)
                    }
                    _ => ds,
                };
                let ds = cap(data::load_idx_with(images, labels, *transpose)?);
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = cap(data::load_idx_with(ti, tl, *transpose)?);
                        let (train, val) = data::split_train_val(&ds, split)?;
                        Ok(Splits { train, val, test })
                    }
                    (None, None) => three_way(ds),
                    _ => Err(Error::Config("test_images and test_labels must be given together".into())),
                }
            }
            DataConfig::Csv {
                path,
                label_column,
                features,
            } => three_way(data::load_csv(path, label_column, features.as_deref())?),
            DataConfig::TwoSpirals { n_per_class, noise, seed } => {
                three_way(data::gen_two_spirals(*n_per_class, *noise, *seed)?)
            }
            DataConfig::XorQuadrants { n, margin, seed } => three_way(data::gen_xor_quadrants(*n, *margin, *seed)?),
        }
    }
}

/// A complete run description: data, split, output location and the
/// experiment settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Defaults to `$PB_RUN_ROOT`, then `runs`.
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "experiment".into(),
            output_dir: None,
            data: DataConfig::default(),
            split: SplitSpec::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(default = "default_name")]
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    split: SplitSpec,
}

fn default_name() -> String {
    "experiment".into()
}

const ENVELOPE_KEYS: [&str; 4] = ["name", "output_dir", "data", "split"];

impl RunConfig {
    /// Parses a TOML document after applying `overrides` (`dotted.key=value`).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut env = toml::Table::new();
        for k in ENVELOPE_KEYS {
            if let Some(v) = table.remove(k) {
                env.insert(k.to_string(), v);
            }
        }
        let envelope: Envelope = env.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let experiment: ExperimentConfig =
            table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let cfg = RunConfig {
            name: envelope.name,
            output_dir: envelope.output_dir,
            data: envelope.data,
            split: envelope.split,
            experiment,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data and output paths are taken
    /// relative to the file's directory.
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        cfg.data.resolve_paths(base);
        if let Some(o) = &mut cfg.output_dir {
            if o.is_relative() {
                *o = base.join(&*o);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid experiment name {:?}", self.name)));
        }
        let split = if self.data.has_test_set() {
            self.split.validate_train_val()
        } else {
            self.split.validate()
        };
        split.map_err(|e| Error::Config(e.to_string()))?;
        self.experiment.validate()
    }

    /// Fully resolved config as TOML.
    pub fn to_toml_string(&self) -> Result<String> {
        let env = Envelope {
            name: self.name.clone(),
            output_dir: self.output_dir.clone(),
            data: self.data.clone(),
            split: self.split.clone(),
        };
        let mut table = toml::Table::try_from(&self.experiment).map_err(|e| Error::Config(e.to_string()))?;
        let env = toml::Table::try_from(&env).map_err(|e| Error::Config(e.to_string()))?;
        table.extend(env);
        toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn run_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// `<name>-<mode>-s<seed>`; one directory per id under the run root.
    pub fn experiment_id(&self) -> String {
        experiment_id(&self.name, self.experiment.ablation_mode, self.experiment.seed)
    }
}

pub fn experiment_id(name: &str, mode: AblationMode, seed: u64) -> String {
    format!("{name}-{}-s{seed}", mode.name())
}

/// Sets `key` (dotted path) in `table` to `value`, read as a TOML value or,
/// failing that, as a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, path) = parts.split_last().unwrap();
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
