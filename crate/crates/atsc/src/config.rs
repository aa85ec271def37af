//! Run, pretrain, and sweep configuration files: versioned JSON with strict
//! parsing (unknown keys are errors, so a typo in a swept name cannot pass
//! silently).

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::EncoderSpec;
use crate::trainer::{OptimConfig, TrainMode};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

fn default_reduction_factor() -> usize {
    2
}

/// Where a teacher comes from: a pretrained checkpoint directory for offline
/// modes, or an encoder spec to initialize randomly for the online baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<EncoderSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: TrainMode,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub teachers: Vec<TeacherSource>,
    pub student: EncoderSpec,
    /// Balancing weight of the anchor penalty. Defaults to 1 for modes that
    /// use it; setting it for other modes draws a warning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_reduction_factor")]
    pub reduction_factor: usize,
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.student.validate()?;
        self.optim.validate()?;
        if let Some(a) = self.alpha {
            if !(a >= 0.0) {
                return Err(Error::Config("alpha must be nonnegative".into()));
            }
        }
        if self.reduction_factor == 0 {
            return Err(Error::Config("reduction_factor must be at least 1".into()));
        }
        let n = self.teachers.len();
        match self.mode {
            TrainMode::StandaloneStudent => {
                if n != 0 {
                    return Err(Error::Config(
                        "standalone_student takes no teachers".into(),
                    ));
                }
            }
            TrainMode::MultiAtsc => {
                if n == 0 {
                    return Err(Error::Config(
                        "multi_atsc requires at least one teacher".into(),
                    ));
                }
            }
            _ => {
                if n != 1 {
                    return Err(Error::Config(format!(
                        "mode {} requires exactly one teacher, got {n}",
                        self.mode
                    )));
                }
            }
        }
        for (i, t) in self.teachers.iter().enumerate() {
            if self.mode.requires_pretrained_teacher() {
                let path = t.checkpoint.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "teachers[{i}].checkpoint is required for mode {}",
                        self.mode
                    ))
                })?;
                if !path.join(crate::model::checkpoint::MANIFEST_FILE).exists() {
                    return Err(Error::Config(format!(
                        "teachers[{i}].checkpoint {} does not hold a checkpoint manifest",
                        path.display()
                    )));
                }
            } else {
                let spec = t.spec.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "teachers[{i}].spec is required for online mode {}",
                        self.mode
                    ))
                })?;
                spec.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub encoder: EncoderSpec,
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.dataset.validate()?;
        self.encoder.validate()?;
        self.optim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Alpha,
    ReductionFactor,
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParameter::Alpha => write!(f, "alpha"),
            SweepParameter::ReductionFactor => write!(f, "reduction_factor"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub base: RunConfig,
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Number of paired seeds per grid value, starting at `base.seed`.
    pub seeds_per_cell: usize,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {}",
                self.schema_version
            )));
        }
        self.base.validate()?;
        if self.values.is_empty() {
            return Err(Error::Config("sweep values grid must not be empty".into()));
        }
        if self.seeds_per_cell == 0 {
            return Err(Error::Config("seeds_per_cell must be at least 1".into()));
        }
        match self.parameter {
            SweepParameter::Alpha => {
                if self.values.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::Config("swept alpha values must be nonnegative".into()));
                }
            }
            SweepParameter::ReductionFactor => {
                if self
                    .values
                    .iter()
                    .any(|&v| v < 1.0 || v.fract() != 0.0 || !v.is_finite())
                {
                    return Err(Error::Config(
                        "swept reduction factors must be positive integers".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The run configuration of one sweep cell.
    pub fn cell_config(&self, value: f64, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.seed = seed;
        match self.parameter {
            SweepParameter::Alpha => cfg.alpha = Some(value),
            SweepParameter::ReductionFactor => cfg.reduction_factor = value as usize,
        }
        cfg
    }
}

/// Loads a strict JSON config; parse errors name the offending field.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_config_json() -> serde_json::Value {
        serde_json::json!({
            "schema_version": 1,
            "mode": "standalone_student",
            "dataset": {
                "kind": "synthetic",
                "num_classes": 4,
                "dims": 8,
                "train_size": 64,
                "test_size": 32,
                "seed": 5
            },
            "student": {"kind": "mlp", "in_dim": 8, "hidden": [6], "feat_dim": 4},
            "optim": {"epochs": 2, "batch_size": 16},
            "seed": 3
        })
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = serde_json::from_value(run_config_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.reduction_factor, 2);
        assert_eq!(cfg.effective_alpha(), 1.0);
        assert_eq!(cfg.optim.momentum, 0.9);
        assert_eq!(cfg.optim.base_lr, 0.05);
        assert_eq!(cfg.optim.batch_size, 16);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut v = run_config_json();
        v["learning_rate_typo"] = serde_json::json!(0.1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());

        let mut v = run_config_json();
        v["optim"]["momentun"] = serde_json::json!(0.9);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn missing_required_field_is_named() {
        let mut v = run_config_json();
        v.as_object_mut().unwrap().remove("dataset");
        let err = serde_json::from_value::<RunConfig>(v).unwrap_err();
        assert!(err.to_string().contains("dataset"));
    }

    #[test]
    fn teacher_arity_is_checked() {
        let mut cfg: RunConfig = serde_json::from_value(run_config_json()).unwrap();
        cfg.mode = TrainMode::Atsc;
        assert!(cfg.validate().is_err()); // no teacher configured
    }
}
