//! Experiment descriptions read from JSON files or built from presets.

use std::fs;
use std::path::{Path, PathBuf};

use contrastive_dynamics::infinite_width::Temperature;
use contrastive_dynamics::training::{RecorderSpec, Schedule};
use contrastive_dynamics::{ExpectationStrategy, LossKind, ModelConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Bumped whenever a CSV header or a summary field changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub strategy: ExpectationStrategy,
    #[serde(default)]
    pub recorder: RecorderSpec,
    /// Output directory; excluded from the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

/// Command-line adjustments applied on top of a spec or preset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub eta: Option<f64>,
    pub stride: Option<u64>,
    pub steps: Option<u64>,
    pub exact: bool,
    pub mc: Option<u64>,
    pub mc_seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, spec: &mut ExperimentSpec) -> CliResult<()> {
        if self.exact && self.mc.is_some() {
            return Err(CliError::Usage("--exact and --mc are mutually exclusive".into()));
        }
        if let Some(seed) = self.seed {
            spec.model.seed = seed;
        }
        if let Some(eta) = self.eta {
            spec.schedule.eta = eta;
        }
        if let Some(stride) = self.stride {
            if stride == 0 {
                return Err(CliError::Usage("--stride must be positive".into()));
            }
            spec.recorder.stride = stride;
        }
        if let Some(steps) = self.steps {
            spec.schedule.total_steps = steps;
            spec.schedule.switch_step = spec.schedule.switch_step.min(steps);
        }
        if self.exact {
            spec.strategy = ExpectationStrategy::exact().with_budget(spec.strategy.budget);
        }
        if let Some(samples) = self.mc {
            spec.strategy =
                ExpectationStrategy::monte_carlo(samples, spec.strategy.mc_seed).with_budget(spec.strategy.budget);
        }
        if let Some(seed) = self.mc_seed {
            spec.strategy.mc_seed = seed;
        }
        Ok(())
    }
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or("experiment")
    }

    /// Checks everything a run needs before any artifact is written.
    pub fn validate(&self) -> CliResult<Vec<String>> {
        let warnings = self.model.validate()?;
        self.schedule.validate()?;
        if self.recorder.stride == 0 {
            return Err(CliError::Usage("recorder stride must be positive".into()));
        }
        Ok(warnings.iter().map(ToString::to_string).collect())
    }

    /// Hex SHA-256 of the canonical JSON of this experiment without its output path.
    pub fn hash(&self) -> String {
        let mut bare = self.clone();
        bare.out = None;
        spec_hash(&bare)
    }
}

/// Infinite-width job: a bare ODE integration or a comparison against a
/// finite-width training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum IwJob {
    Ode {
        #[serde(default)]
        name: Option<String>,
        sigma_sq: Vec<f64>,
        kappa_sq: Vec<f64>,
        hat_kappa_sq: Vec<f64>,
        #[serde(rename = "K")]
        negatives: f64,
        temperature: Temperature,
        step: f64,
        horizon: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out: Option<PathBuf>,
    },
    Tracking {
        experiment: ExperimentSpec,
    },
}

impl IwJob {
    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    pub fn display_name(&self) -> &str {
        match self {
            IwJob::Ode { name, .. } => name.as_deref().unwrap_or("iw"),
            IwJob::Tracking { experiment } => experiment.display_name(),
        }
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            IwJob::Ode { out, .. } => out.as_deref(),
            IwJob::Tracking { experiment } => experiment.out.as_deref(),
        }
    }

    pub fn hash(&self) -> String {
        let mut bare = self.clone();
        match &mut bare {
            IwJob::Ode { out, .. } => *out = None,
            IwJob::Tracking { experiment } => experiment.out = None,
        }
        spec_hash(&bare)
    }
}

fn spec_hash<T: Serialize>(value: &T) -> String {
    // serde_json::Value keeps object keys sorted, which makes the bytes canonical.
    let canonical = serde_json::to_value(value).and_then(|v| serde_json::to_vec(&v));
    let bytes = canonical.expect("specs always serialize");
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_owned(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_owned(),
        source,
    })
}
