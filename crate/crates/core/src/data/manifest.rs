use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Standardization;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Named IDX datasets and their frozen standardization constants.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(default)]
    pub datasets: BTreeMap<String, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Fitted on the training split the first time the entry is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

impl DatasetManifest {
    pub fn new() -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            datasets: BTreeMap::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: DatasetManifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "manifest schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.datasets
            .get(name)
            .ok_or_else(|| Error::Config(format!("dataset {name:?} is not in the manifest")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut m = DatasetManifest::new();
        m.datasets.insert(
            "mnist".into(),
            ManifestEntry {
                train_images: "train-images-idx3-ubyte".into(),
                train_labels: "train-labels-idx1-ubyte".into(),
                test_images: "t10k-images-idx3-ubyte".into(),
                test_labels: "t10k-labels-idx1-ubyte".into(),
                standardization: Some(Standardization {
                    mean: vec![0.1307],
                    std: vec![0.3081],
                }),
            },
        );
        let back = DatasetManifest::from_toml(&m.to_toml().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = "schema_version = 1\nextra = 2\n";
        assert!(DatasetManifest::from_toml(text).is_err());
    }
}
