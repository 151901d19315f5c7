//! Experiment configuration: every field defaults, so a config file only
//! names what it changes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use odml_core::dataset::{gen_synthetic, SplitMode, SyntheticParams, TaskDataset, TaskSplitPlan};
use odml_core::{Dataset, Mode, TrainingConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticParams),
    Csv(PathBuf),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticParams::default())
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(p) => Ok(gen_synthetic(p)?),
            DatasetSource::Csv(path) => Ok(Dataset::load_csv(path)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Tasks after the first one; multi-task only.
    pub stages: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::OneTask,
            stages: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub training: TrainingConfig,
    pub output_dir: PathBuf,
    pub modes: Vec<Mode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            split: SplitConfig::default(),
            training: TrainingConfig::default(),
            output_dir: PathBuf::from("runs/default"),
            modes: vec![Mode::Initial, Mode::FineTune, Mode::Joint, Mode::Ours],
        }
    }
}

pub const CONFIG_FILE: &str = "run_config.json";

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The configuration stored in a run directory.
    pub fn from_run_dir(run_dir: &Path) -> Result<Self> {
        Self::from_file(&run_dir.join(CONFIG_FILE))
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.modes.is_empty() {
            bail!("no modes selected");
        }
        if self.split.mode == SplitMode::MultiTask && self.split.stages == 0 {
            bail!("multi-task split needs stages >= 1");
        }
        Ok(())
    }

    pub fn tasks(&self, data: &Dataset) -> Result<Vec<TaskDataset>> {
        let plan = TaskSplitPlan::for_mode(self.split.mode, data.n_classes(), self.split.stages)?;
        Ok(plan.apply(data)?)
    }

    pub fn training_for(&self, mode: Mode) -> TrainingConfig {
        self.training.with_mode(mode)
    }
}
