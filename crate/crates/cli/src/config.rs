//! TOML run configuration. Every field has a default; unknown keys are
//! rejected. The fully resolved config (defaults applied, flags folded in) is
//! echoed into every output directory for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use transplant_core::error::{Error, Result};
use transplant_core::experiments::{ExperimentPlan, PretrainBudget, RunKnobs, TaskKind};
use transplant_core::graph::{AdapterArch, AdapterInit};
use transplant_core::shapeworld::ShapeWorldSpec;
use transplant_core::tensor::Precision;
use transplant_core::train::Strategy;

/// Top-level configuration shared by all subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub general: GeneralCfg,
    pub dataset: ShapeWorldSpec,
    pub pretrain: PretrainCfg,
    pub transplant: TransplantCfg,
    pub plan: Option<PlanCfg>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralCfg {
    /// Numeric precision: `single` (training default) or `double`.
    pub precision: Precision,
    /// Seed for everything not overridden per run.
    pub seed: u64,
}

impl Default for GeneralCfg {
    fn default() -> Self {
        GeneralCfg {
            precision: Precision::Single,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainCfg {
    pub category: String,
    pub task: TaskKind,
    #[serde(flatten)]
    pub budget: PretrainBudget,
    /// When set, exports the train/val/test splits next to the checkpoint.
    pub export_dataset: bool,
}

impl Default for PretrainCfg {
    fn default() -> Self {
        PretrainCfg {
            category: "disk".into(),
            task: TaskKind::Cls,
            budget: PretrainBudget::default(),
            export_dataset: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransplantCfg {
    pub strategy: Strategy,
    pub samples: usize,
    pub adapter: AdapterArch,
    pub init: AdapterInit,
    #[serde(flatten)]
    pub knobs: RunKnobs,
}

impl Default for TransplantCfg {
    fn default() -> Self {
        TransplantCfg {
            strategy: Strategy::BackDistill,
            samples: 0,
            adapter: AdapterArch::default(),
            init: AdapterInit::default(),
            knobs: RunKnobs::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanCfg {
    #[serde(flatten)]
    pub plan: ExperimentPlan,
    pub teacher_budget: PretrainBudget,
}

impl Default for PlanCfg {
    fn default() -> Self {
        PlanCfg {
            plan: ExperimentPlan::exp1(),
            teacher_budget: PretrainBudget::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Writes the fully resolved configuration for provenance.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config encode: {e}")))?;
        std::fs::write(dir.join("config.resolved.toml"), text)?;
        Ok(())
    }
}
