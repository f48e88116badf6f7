use std::path::{Path, PathBuf};

use attnet_core::data::DatasetManifest;
use attnet_core::train::{GridConfig, TrainConfig};
use attnet_core::zoo::{default_branches, Backbone, ModelSpec};
use serde::{Deserialize, Serialize};

/// Env var that relocates relative output directories.
pub const OUT_ROOT_ENV: &str = "ATTNET_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Validation samples whose masks are exported after every epoch.
    pub probes: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self { probes: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub data: PathBuf,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dataset: DatasetManifest,
    pub grid: GridConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    /// Desk profile: 128x96 inputs, eighth-width VGG-16, two branches.
    fn default() -> Self {
        let dataset = DatasetManifest::default();
        Self {
            out: PathBuf::from("runs/latest"),
            data: PathBuf::from("data/synthetic"),
            model: ModelSpec {
                backbone: Backbone::Vgg16,
                input: dataset.image_size,
                width_multiplier: 0.125,
                branches: default_branches(Backbone::Vgg16, 2),
                ..ModelSpec::default()
            },
            train: TrainConfig::default(),
            dataset,
            grid: GridConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a seed override to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.dataset.seed = seed;
    }

    /// Every problem with the model and training sections.
    pub fn model_problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Err(e) = self.model.validate() {
            p.push(format!("model: {e}"));
        }
        p.extend(self.train.problems().into_iter().map(|s| format!("train: {s}")));
        if !self.train.loss_weights.is_empty() && self.train.loss_weights.len() != self.model.branches.len() {
            p.push(format!(
                "train: {} loss weights for {} branches",
                self.train.loss_weights.len(),
                self.model.branches.len()
            ));
        }
        p
    }

    pub fn dataset_problems(&self) -> Vec<String> {
        match self.dataset.validate() {
            Ok(()) => Vec::new(),
            Err(e) => vec![format!("dataset: {e}")],
        }
    }
}

/// Resolves a relative output path under the override root, if one is set.
pub fn output_dir(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}
