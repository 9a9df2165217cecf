//! Dataset manifest: which records exist, where their EDF and annotation
//! files live, and which split each belongs to.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad manifest: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub edf: PathBuf,
    pub annotations: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<RecordEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest, ManifestError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &RecordEntry> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_split_filter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = DatasetManifest {
            records: vec![
                RecordEntry {
                    id: "train-000".into(),
                    edf: "train-000.edf".into(),
                    annotations: "train-000.csv".into(),
                    split: Split::Train,
                },
                RecordEntry {
                    id: "test-000".into(),
                    edf: "test-000.edf".into(),
                    annotations: "test-000.csv".into(),
                    split: Split::Test,
                },
            ],
        };
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.split(Split::Test).count(), 1);
        assert_eq!(back.split(Split::Eval).count(), 0);
    }
}
