//! On-disk chain of stage artifacts:
//! `<root>/stage_<i>/{model.bin, state.bin, meta.json, report.json}`.
//!
//! `meta.json` is written after `model.bin`, so its presence marks the model
//! as complete; `report.json` is written last.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::drift::StageState;
use crate::error::{OdmlError, Result};
use crate::model::EmbeddingModel;
use crate::pipeline::{Mode, StageReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: usize,
    pub mode: Mode,
    /// Classes learned at this stage.
    pub classes: Vec<usize>,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| OdmlError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(OdmlError::Registry(format!("{} is not a directory", root.display())));
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: usize) -> PathBuf {
        self.root.join(format!("stage_{stage}"))
    }

    pub fn model_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("model.bin")
    }

    pub fn state_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("state.bin")
    }

    fn meta_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("meta.json")
    }

    fn report_path(&self, stage: usize) -> PathBuf {
        self.stage_dir(stage).join("report.json")
    }

    pub fn save_model(&self, model: &EmbeddingModel, meta: &StageMeta) -> Result<()> {
        let dir = self.stage_dir(meta.stage);
        fs::create_dir_all(&dir).map_err(|e| OdmlError::io(&dir, e))?;
        // A rewritten model invalidates whatever followed it.
        for stale in [
            self.meta_path(meta.stage),
            self.report_path(meta.stage),
            self.state_path(meta.stage),
        ] {
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| OdmlError::io(&stale, e))?;
            }
        }
        model.save(&self.model_path(meta.stage))?;
        write_json(&self.meta_path(meta.stage), meta)
    }

    pub fn load_model(&self, stage: usize) -> Result<EmbeddingModel> {
        if !self.meta_path(stage).exists() {
            return Err(OdmlError::Registry(format!("stage {stage} has no completed model")));
        }
        EmbeddingModel::load(&self.model_path(stage))
    }

    pub fn load_meta(&self, stage: usize) -> Result<Option<StageMeta>> {
        read_json_opt(&self.meta_path(stage))
    }

    pub fn save_state(&self, state: &StageState) -> Result<()> {
        state.save(&self.state_path(state.stage))
    }

    pub fn load_state(&self, stage: usize) -> Result<Option<StageState>> {
        let path = self.state_path(stage);
        if !path.exists() {
            return Ok(None);
        }
        StageState::load(&path).map(Some)
    }

    pub fn save_report(&self, report: &StageReport) -> Result<()> {
        write_json(&self.report_path(report.stage), report)
    }

    pub fn load_report(&self, stage: usize) -> Result<Option<StageReport>> {
        read_json_opt(&self.report_path(stage))
    }

    /// Number of leading stages whose model and metadata are present.
    pub fn completed_stages(&self) -> usize {
        (1..)
            .take_while(|&s| self.meta_path(s).exists() && self.model_path(s).exists())
            .count()
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| OdmlError::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| OdmlError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_json_opt<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    read_json(path).map(Some)
}
