//! Versioned TOML experiment files.
//!
//! Unknown fields anywhere in the file are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::objectives::Method;
use crate::train::TrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Idx,
    Manifest,
}

fn default_train_fraction() -> f64 {
    0.5
}
fn default_few_shot() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Synthetic generator parameters (`source = "synthetic"`).
    #[serde(default)]
    pub generator: Option<SyntheticKind>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Share of synthetic samples used for training; the rest is the test set.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub entry: Option<String>,
    /// Per-channel standardization fitted on the training split. Defaults
    /// to on for image sources and off for synthetic data.
    #[serde(default)]
    pub standardize: Option<bool>,
    /// Share of the training split available to the student.
    #[serde(default = "default_few_shot")]
    pub few_shot_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub widths: Vec<usize>,
    /// Existing teacher weights; when absent the teacher is trained first.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Teacher schedule; defaults to `[train]` with method `vanilla`.
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub widths: Vec<usize>,
}

fn default_methods() -> Vec<Method> {
    vec![Method::Vanilla, Method::Kd, Method::L2rkd]
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_r_values() -> Vec<f64> {
    vec![0.2, 0.5, 1.0, 2.0]
}
fn default_fractions() -> Vec<f64> {
    vec![0.6, 0.4, 0.2, 0.1]
}
fn default_sigmas() -> Vec<f64> {
    vec![0.1, 0.05, 0.01, 0.005]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_r_values")]
    pub r_values: Vec<f64>,
    #[serde(default = "default_fractions")]
    pub few_shot_fractions: Vec<f64>,
    #[serde(default = "default_sigmas")]
    pub noise_sigmas: Vec<f64>,
    /// Worker threads for independent runs; defaults to all cores.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: default_methods(),
            seeds: default_seeds(),
            r_values: default_r_values(),
            few_shot_fractions: default_fractions(),
            noise_sigmas: default_sigmas(),
            workers: None,
        }
    }
}

/// One experiment: data, teacher, student, schedule and sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn teacher_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.teacher.widths.clone())
            .map_err(|e| Error::Config(format!("teacher.widths: {e}")))
    }

    pub fn student_spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.student.widths.clone())
            .map_err(|e| Error::Config(format!("student.widths: {e}")))
    }

    /// Schedule used for teacher training (always `vanilla`).
    pub fn teacher_train_config(&self) -> TrainConfig {
        self.teacher
            .train
            .clone()
            .unwrap_or_else(|| self.train.clone())
            .with_method(Method::Vanilla)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.teacher_spec()?;
        self.student_spec()?;
        if self.teacher.widths.first() != self.student.widths.first()
            || self.teacher.widths.last() != self.student.widths.last()
        {
            return Err(Error::Config(format!(
                "teacher.widths {:?} and student.widths {:?} disagree on input or class count",
                self.teacher.widths, self.student.widths
            )));
        }
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if let Some(t) = &self.teacher.train {
            t.validate().map_err(|e| Error::Config(format!("teacher.train: {e}")))?;
        }
        let d = &self.dataset;
        let need = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "dataset.{field} is required for source {:?}",
                    d.source
                )))
            }
        };
        match d.source {
            DatasetSource::Synthetic => {
                need("generator", d.generator.is_some())?;
                need("n", d.n.is_some())?;
                need("dim", d.dim.is_some())?;
                need("classes", d.classes.is_some())?;
                if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
                    return Err(Error::Config(format!(
                        "dataset.train_fraction must lie in (0, 1), got {}",
                        d.train_fraction
                    )));
                }
            }
            DatasetSource::Idx => {
                need("train_images", d.train_images.is_some())?;
                need("train_labels", d.train_labels.is_some())?;
                need("test_images", d.test_images.is_some())?;
                need("test_labels", d.test_labels.is_some())?;
            }
            DatasetSource::Manifest => {
                need("manifest", d.manifest.is_some())?;
                need("entry", d.entry.is_some())?;
            }
        }
        if !(d.few_shot_fraction > 0.0 && d.few_shot_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "dataset.few_shot_fraction must lie in (0, 1], got {}",
                d.few_shot_fraction
            )));
        }
        let s = &self.sweep;
        if s.seeds.is_empty() {
            return Err(Error::Config("sweep.seeds must not be empty".into()));
        }
        if s.workers == Some(0) {
            return Err(Error::Config("sweep.workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that every referenced checkpoint exists.
    pub fn check_references(&self) -> Result<()> {
        if let Some(ck) = &self.teacher.checkpoint {
            let p = self.resolve(ck);
            if !p.exists() {
                return Err(Error::Config(format!(
                    "teacher.checkpoint {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}
