use std::path::{Path, PathBuf};

use hemoseg::metrics::MetricsConfig;
use hemoseg::preprocessing::StrategyKind;
use hemoseg::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldsConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        Self { k: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub threshold: f32,
    /// Directory for per-(checkpoint, case) probability maps.
    pub probability_cache: Option<PathBuf>,
    /// Slices per forward pass.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            probability_cache: None,
            batch_size: 4,
        }
    }
}

/// Everything a pipeline run needs; one file, overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub folds: FoldsConfig,
    pub train: TrainConfig,
    /// Input strategies trained by `cross-validate`; each gets its own models.
    pub strategies: Vec<StrategyKind>,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            folds: FoldsConfig::default(),
            train: TrainConfig::default(),
            strategies: vec![StrategyKind::AdjacentSlices],
            inference: InferenceConfig::default(),
            metrics: MetricsConfig::default(),
            out: None,
        }
    }
}

impl PipelineConfig {
    /// Reads YAML for `.yaml`/`.yml` files and JSON otherwise. Relative paths
    /// inside the file stay relative to the working directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Usage(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(e.to_string()))?;
        let yaml = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("yaml" | "yml")
        );
        let parsed = if yaml {
            serde_yaml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.folds.k < 2 {
            return Err(CliError::Usage(format!(
                "folds.k must be at least 2, got {}",
                self.folds.k
            )));
        }
        if self.strategies.is_empty() {
            return Err(CliError::Usage("strategies must not be empty".into()));
        }
        if !(self.inference.threshold > 0.0 && self.inference.threshold < 1.0) {
            return Err(CliError::Usage(
                "inference.threshold must lie in (0, 1)".into(),
            ));
        }
        if self.inference.batch_size == 0 {
            return Err(CliError::Usage(
                "inference.batch_size must be positive".into(),
            ));
        }
        self.metrics
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_and_yaml_agree() {
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("c.json");
        let yaml = dir.path().join("c.yaml");
        std::fs::write(
            &json,
            r#"{"folds": {"k": 3, "seed": 9}, "train": {"epochs": 7}}"#,
        )
        .unwrap();
        std::fs::write(&yaml, "folds:\n  k: 3\n  seed: 9\ntrain:\n  epochs: 7\n").unwrap();
        let a = PipelineConfig::load(&json).unwrap();
        let b = PipelineConfig::load(&yaml).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.folds.k, 3);
        assert_eq!(a.train.epochs, 7);
        assert_eq!(a.train.lr0, 2e-4);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn readme_example_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.yaml");
        let readme = include_str!("../../../README.md");
        let start = readme.find("```yaml\n").unwrap() + 8;
        let end = start + readme[start..].find("```").unwrap();
        std::fs::write(&path, &readme[start..end]).unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.strategies.len(), 2);
        assert_eq!(cfg.train.snapshot_epochs, [1200, 1400]);
    }

    #[test]
    fn malformed_and_unknown_fields_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        assert!(matches!(
            PipelineConfig::load(&bad),
            Err(CliError::Usage(_))
        ));
        std::fs::write(&bad, r#"{"fold": {"k": 3}}"#).unwrap();
        assert!(matches!(
            PipelineConfig::load(&bad),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            PipelineConfig::load(&dir.path().join("none.json")),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn small_k_rejected() {
        let mut c = PipelineConfig::default();
        c.folds.k = 1;
        assert!(matches!(c.validate(), Err(CliError::Usage(_))));
    }
}
