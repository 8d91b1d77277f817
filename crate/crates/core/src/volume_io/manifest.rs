use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_mask, load_volume, Mask, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Dataset manifest: a JSON object mapping case id to `{image, label}`.
///
/// Relative paths are resolved against the directory holding the manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub cases: BTreeMap<String, CaseEntry>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            cases: BTreeMap::new(),
            root: root.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let cases: BTreeMap<String, CaseEntry> =
            serde_json::from_str(&text).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { cases, root })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.cases)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn insert(&mut self, case_id: impl Into<String>, image: PathBuf, label: PathBuf) {
        self.cases
            .insert(case_id.into(), CaseEntry { image, label });
    }

    pub fn case_ids(&self) -> Vec<String> {
        self.cases.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    fn entry(&self, case_id: &str) -> Result<&CaseEntry> {
        self.cases
            .get(case_id)
            .ok_or_else(|| Error::arg(format!("case {case_id:?} is not in the manifest")))
    }

    pub fn image_path(&self, case_id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(case_id)?.image))
    }

    pub fn label_path(&self, case_id: &str) -> Result<PathBuf> {
        Ok(self.root.join(&self.entry(case_id)?.label))
    }

    /// Loads image and label, checks they are aligned and tags both with the
    /// manifest's case id.
    pub fn load_case(&self, case_id: &str) -> Result<(Volume, Mask)> {
        let mut volume = load_volume(self.image_path(case_id)?)?;
        let mut mask = load_mask(self.label_path(case_id)?)?;
        if volume.shape() != mask.shape() {
            return Err(Error::Alignment(format!(
                "case {case_id}: image shape {:?} vs label shape {:?}",
                volume.shape(),
                mask.shape()
            )));
        }
        volume.case_id = case_id.to_string();
        mask.case_id = case_id.to_string();
        Ok((volume, mask))
    }

    pub fn load_image(&self, case_id: &str) -> Result<Volume> {
        let mut volume = load_volume(self.image_path(case_id)?)?;
        volume.case_id = case_id.to_string();
        Ok(volume)
    }
}
