//! Experiment configuration: flat JSON with one nested section per
//! subsystem.

use std::path::{Path, PathBuf};

use ftlab::attack::AttackConfig;
use ftlab::data::{DomainShift, ShiftKind, TaskSpec};
use ftlab::model::ModelConfig;
use ftlab::peft::PeftSpec;
use ftlab::tracking::{Schedule, ScheduleMode, TrainingConfig, DEFAULT_EVAL_SUBSET};
use ftlab::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub peft: PeftSpec,
    pub task: TaskSpec,
    pub attack: AttackConfig,
    pub schedule_mode: ScheduleMode,
    /// Stride-table override; None uses the standard table for the mode.
    #[serde(default)]
    pub schedule_ranges: Option<Vec<(u64, Option<u64>, u64)>>,
    /// Domains evaluated in OOD mode; None uses every non-identity kind at
    /// strength 0.5.
    #[serde(default)]
    pub shifts: Option<Vec<DomainShift>>,
    pub training: TrainingConfig,
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_eval_subset() -> usize {
    DEFAULT_EVAL_SUBSET
}

/// Model section without a class count: heads come from the task
/// (upstream classes for pre-training, downstream for fine-tuning).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub ffn_ratio: usize,
}

fn default_channels() -> usize {
    1
}

impl ModelSection {
    pub fn with_classes(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            embed_dim: self.embed_dim,
            heads: self.heads,
            patch_size: self.patch_size,
            image_size: self.image_size,
            channels: self.channels,
            num_classes,
            ffn_ratio: self.ffn_ratio,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_down = self.model.with_classes(self.task.num_classes_downstream);
        cfg_down.validate()?;
        self.model
            .with_classes(self.task.num_classes_upstream)
            .validate()?;
        self.peft.validate(&cfg_down)?;
        self.task.validate()?;
        self.attack.validate()?;
        self.training.validate()?;
        if self.task.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "task.image_size ({}) must match model.image_size ({})",
                self.task.image_size, self.model.image_size
            )));
        }
        if self.task.channels != self.model.channels {
            return Err(Error::Config(format!(
                "task.channels ({}) must match model.channels ({})",
                self.task.channels, self.model.channels
            )));
        }
        if let Some(shifts) = &self.shifts {
            for s in shifts {
                s.validate()?;
            }
        }
        self.schedule().validate()?;
        if self.eval_subset == 0 {
            return Err(Error::Config("eval_subset must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Schedule {
        match &self.schedule_ranges {
            Some(ranges) => Schedule {
                mode: self.schedule_mode,
                ranges: ranges.clone(),
            },
            None => Schedule::standard(self.schedule_mode),
        }
    }

    pub fn ood_shifts(&self) -> Vec<DomainShift> {
        self.shifts.clone().unwrap_or_else(|| {
            ShiftKind::ALL
                .into_iter()
                .filter(|k| *k != ShiftKind::Identity)
                .map(|kind| DomainShift { kind, strength: 0.5 })
                .collect()
        })
    }
}
