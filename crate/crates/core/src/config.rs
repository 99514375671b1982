//! Experiment configuration files (YAML or JSON).
//!
//! Every section is optional and falls back to the PicoDet-S defaults.
//! Unknown keys are rejected with the path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::AssignerConfig;
use crate::augment::AugmentConfig;
use crate::data::{render_synthetic, BoxPolicy, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::nas::{SearchBudget, SearchSpace};
use crate::train::{TrainConfig, TrainSetup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// COCO-JSON file or a directory holding `annotations.json`. When unset
    /// the synthetic set described by `synthetic` is rendered in memory.
    pub train: Option<PathBuf>,
    /// Evaluation set; defaults to the training set.
    pub val: Option<PathBuf>,
    pub box_policy: BoxPolicy,
    pub synthetic: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: None, val: None, box_policy: BoxPolicy::Reject, synthetic: SynthSpec::default() }
    }
}

impl DataConfig {
    pub fn load_train(&self) -> Result<Dataset> {
        match &self.train {
            Some(p) => Dataset::load(p, self.box_policy),
            None => {
                let (index, images) = render_synthetic(&self.synthetic);
                Ok(Dataset::in_memory(index, images))
            }
        }
    }

    pub fn load_val(&self) -> Result<Dataset> {
        match &self.val {
            Some(p) => Dataset::load(p, self.box_policy),
            None => self.load_train(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NasConfig {
    pub space: SearchSpace,
    pub budget: SearchBudget,
    /// Budget as a fraction of the full supernet cost; used when
    /// `budget.max_flops` is not finite.
    pub budget_fraction: Option<f64>,
    /// Square input size for cost estimates and fitness evaluation.
    pub input_size: u32,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig { space: SearchSpace::default(), budget: SearchBudget::default(), budget_fraction: None, input_size: 320 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub assigner: AssignerConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub nas: NasConfig,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str, origin: &str) -> Result<Self> {
        let de = serde_yaml::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { origin.to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_yaml(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.val].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        log::debug!("resolved config:\n{}", cfg.to_yaml());
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let checks: [(&str, std::result::Result<(), String>); 6] = [
            ("loss", self.loss.validate()),
            ("assigner", self.assigner.validate()),
            ("train", self.train.validate()),
            ("augment", self.augment.validate()),
            ("nas.space", self.nas.space.validate()),
            ("nas.budget", self.nas.budget.validate()),
        ];
        for (path, r) in checks {
            r.map_err(|m| Error::config(path, m))?;
        }
        if let Some(f) = self.nas.budget_fraction {
            if !(f > 0.0) {
                return Err(Error::config("nas.budget_fraction", format!("must be positive, got {f}")));
            }
        }
        if self.nas.input_size == 0 {
            return Err(Error::config("nas.input_size", "must be positive"));
        }
        Ok(())
    }

    /// Overlays a partial config (such as an exported genotype) on `self`.
    pub fn merged_with(&self, fragment: &str) -> Result<Self> {
        merge_fragment(self, fragment)
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            augment: self.augment.clone(),
            assigner: self.assigner.clone(),
            loss: self.loss.clone(),
        }
    }
}

/// Recursively overlays the mappings of `fragment` onto `base`.
pub fn merge_fragment(base: &ExperimentConfig, fragment: &str) -> Result<ExperimentConfig> {
    fn overlay(dst: &mut serde_yaml::Value, src: serde_yaml::Value) {
        match (dst, src) {
            (serde_yaml::Value::Mapping(d), serde_yaml::Value::Mapping(s)) => {
                for (k, v) in s {
                    match d.get_mut(&k) {
                        Some(slot) => overlay(slot, v),
                        None => {
                            d.insert(k, v);
                        }
                    }
                }
            }
            (d, s) => *d = s,
        }
    }
    let mut value = serde_yaml::to_value(base).map_err(|e| Error::config("<base>", e.to_string()))?;
    let frag: serde_yaml::Value = serde_yaml::from_str(fragment).map_err(|e| Error::config("<fragment>", e.to_string()))?;
    overlay(&mut value, frag);
    ExperimentConfig::from_yaml(&serde_yaml::to_string(&value).expect("yaml value serialises"), "<merged>")
}
