//! Run configuration: one JSON document with sections `dataset`,
//! `hierarchy`, `model`, `diffusion`, `training` and `rollout`. Missing keys
//! take their defaults; single keys can be overridden by dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ampn::{AmpnConfig, LayerCounts, WeightSharing};
use crate::datagen::{DatasetKind, SpecRanges};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchyParams;
use crate::model::cond_channel;
use crate::robi::Mode;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Trajectories in the train, valid and test splits.
    pub counts: [usize; 3],
    pub steps: usize,
    pub seed: u64,
    pub ranges: SpecRanges,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            kind: DatasetKind::Beam,
            counts: [64, 8, 8],
            steps: 50,
            seed: 0,
            ranges: SpecRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub layers: LayerCounts,
    pub fourier_bands: usize,
    pub sharing: WeightSharing,
    pub level_code: bool,
    /// Conditioning channels; `None` picks the dataset kind's default.
    pub cond: Option<Vec<String>>,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
    /// Floating-point type of training and rollouts.
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: 128,
            layers: LayerCounts::default(),
            fourier_bands: 16,
            sharing: WeightSharing::Shared,
            level_code: true,
            cond: None,
            init_seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    /// Number of denoising steps `K`.
    pub steps: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection { steps: 20 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Robi,
    Sequential,
    Onestep,
}

impl std::str::FromStr for ModeName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "robi" => Ok(ModeName::Robi),
            "sequential" => Ok(ModeName::Sequential),
            "onestep" => Ok(ModeName::Onestep),
            other => Err(Error::Config(format!("unknown mode {other:?}; expected robi, sequential or onestep"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutSection {
    pub mode: ModeName,
    /// Denoising stride for the rolling-window mode.
    pub m: usize,
    /// Predicted steps; `None` rolls out each trajectory to its end.
    pub steps: Option<usize>,
    pub start_frame: usize,
    pub seeds: Vec<u64>,
    pub split: String,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            mode: ModeName::Robi,
            m: 1,
            steps: None,
            start_frame: 0,
            seeds: vec![0, 1, 2],
            split: "test".into(),
        }
    }
}

impl RolloutSection {
    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeName::Robi => Mode::Robi { m: self.m },
            ModeName::Sequential => Mode::Sequential,
            ModeName::Onestep => Mode::OneStep,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub hierarchy: HierarchyParams,
    pub model: ModelSection,
    pub diffusion: DiffusionSection,
    pub training: TrainConfig,
    pub rollout: RolloutSection,
}

/// Conditioning channels used when the run config does not list any.
pub fn default_cond(kind: DatasetKind) -> Vec<String> {
    let names: &[&str] = match kind {
        DatasetKind::Beam => &["bc_force", "stress_prev"],
        DatasetKind::Actuator => &["bc_disp", "stress_prev"],
    };
    names.iter().map(|s| s.to_string()).collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read run config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    /// Applies `section.key[.key...]=value`. The value is parsed as JSON and
    /// falls back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for key in path.split('.') {
            slot = match slot {
                Value::Object(map) => map.get_mut(key),
                Value::Array(items) => key.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override {assignment:?}: {e}")))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        let k = self.diffusion.steps;
        if k < 2 {
            return Err(Error::Config(format!("need at least 2 denoising steps, got {k}")));
        }
        if self.rollout.mode == ModeName::Robi && (self.rollout.m == 0 || !k.is_multiple_of(self.rollout.m)) {
            return Err(Error::Config(format!("denoising stride {} does not divide K = {k}", self.rollout.m)));
        }
        if self.rollout.seeds.is_empty() {
            return Err(Error::Config("rollout needs at least one seed".into()));
        }
        self.model_config(2)?.validate()
    }

    /// Network and hierarchy settings with ablations applied.
    pub fn build(&self, dim: usize) -> Result<(AmpnConfig, HierarchyParams)> {
        let mut model = self.model_config(dim)?;
        let mut hier = self.hierarchy;
        self.training.ablations.apply(&mut model, &mut hier);
        model.validate()?;
        Ok((model, hier))
    }

    fn model_config(&self, dim: usize) -> Result<AmpnConfig> {
        let names = self.model.cond.clone().unwrap_or_else(|| default_cond(self.dataset.kind));
        let cond = names.iter().map(|n| cond_channel(n, dim)).collect::<Result<Vec<_>>>()?;
        Ok(AmpnConfig {
            hidden: self.model.hidden,
            layers: self.model.layers,
            fourier_bands: self.model.fourier_bands,
            sharing: self.model.sharing,
            level_code: self.model.level_code,
            levels: self.hierarchy.levels,
            ..AmpnConfig::new(dim, cond)
        })
    }
}
