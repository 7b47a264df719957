//! Run configuration: one TOML file with `[run]`, `[model]`, `[dino]`,
//! `[fewshot]`, `[labelprop]` and `[data]` sections. Every field has a
//! default; unknown keys are rejected outright.

use std::path::{Path, PathBuf};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::dino::DinoConfig;
use crate::error::{Error, Result};
use crate::fewshot::FewShotConfig;
use crate::labelprop::LabelPropConfig;
use crate::model::ModelConfig;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub precision: Precision,
    /// Worker cap for episode evaluation; 1 guarantees bit-exact determinism.
    pub threads: usize,
    pub out_dir: PathBuf,
    /// Steps between checkpoint snapshots during pretraining.
    pub checkpoint_every: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            precision: Precision::F32,
            threads: 1,
            out_dir: PathBuf::from("runs/default"),
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub base_dir: Option<PathBuf>,
    pub target_dir: Option<PathBuf>,
    /// Fraction of each target class entering the unlabeled pool.
    pub unlabeled_fraction: f64,
    /// Seed of the target split, independent of the run seed so pretraining
    /// and evaluation agree on the pools.
    pub split_seed: u64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            base_dir: None,
            target_dir: None,
            unlabeled_fraction: 0.2,
            split_seed: 1,
            mean: vec![0.5, 0.5, 0.5],
            std: vec![0.5, 0.5, 0.5],
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl DataConfig {
    /// Load or synthesize the (base, target) dataset pair.
    pub fn load<F: Real>(&self) -> Result<(Dataset<F>, Dataset<F>)> {
        match self.source {
            DataSource::Synthetic => data::synth_generate(&self.synthetic),
            DataSource::Folder => {
                let base_dir = self.base_dir.as_ref().ok_or_else(|| {
                    Error::Config("data.base_dir is required for source = \"folder\"".into())
                })?;
                let target_dir = self.target_dir.as_ref().ok_or_else(|| {
                    Error::Config("data.target_dir is required for source = \"folder\"".into())
                })?;
                Ok((data::load_folder(base_dir)?, data::load_folder(target_dir)?))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelConfig,
    pub dino: DinoConfig,
    pub fewshot: FewShotConfig,
    pub labelprop: LabelPropConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.dino.validate().map_err(|e| Error::Config(format!("dino: {e}")))?;
        if self.run.threads == 0 {
            return Err(Error::Config("run.threads must be at least 1".into()));
        }
        if !(0.0 < self.data.unlabeled_fraction && self.data.unlabeled_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.unlabeled_fraction must be in (0,1), got {}",
                self.data.unlabeled_fraction
            )));
        }
        if self.data.mean.len() != self.model.in_channels
            || self.data.std.len() != self.model.in_channels
        {
            return Err(Error::Config(format!(
                "data normalization covers {} channels, model expects {}",
                self.data.mean.len(),
                self.model.in_channels
            )));
        }
        if self.dino.crops.global_res != self.model.input_res
            || self.dino.crops.local_res != self.model.input_res
        {
            return Err(Error::Config(format!(
                "dino.crops resolutions ({}, {}) must equal model.input_res ({})",
                self.dino.crops.global_res, self.dino.crops.local_res, self.model.input_res
            )));
        }
        if !(0.0..1.0).contains(&self.labelprop.alpha) {
            return Err(Error::Config(format!(
                "labelprop.alpha must be in [0,1), got {}",
                self.labelprop.alpha
            )));
        }
        Ok(())
    }

    /// Desk-scale synthetic configuration used by smoke runs and examples.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        let mut dino = DinoConfig::desk();
        dino.crops.global_res = model.input_res;
        dino.crops.local_res = model.input_res;
        RunConfig {
            run: RunSection::default(),
            model,
            dino,
            fewshot: FewShotConfig::default(),
            labelprop: LabelPropConfig::default(),
            data: DataConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("[model]\ninput_res = 16\nembed_dim = 64\nblocks = 2\nheads = 2\n[model.tokenizer]\nkernel = 3\n").unwrap();
        assert_eq!(cfg.run.seed, 0);
        assert_eq!(cfg.fewshot.ways, 5);
        assert_eq!(cfg.labelprop.sigma, 50.0);
        assert_eq!(cfg.dino.out_dim, 65536);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = RunConfig::from_toml_str("[run]\nseedling = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("seedling"), "{msg}");
    }

    #[test]
    fn desk_config_validates() {
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn crop_resolution_mismatch_is_config_error() {
        let mut cfg = RunConfig::desk();
        cfg.dino.crops.global_res = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::desk();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
