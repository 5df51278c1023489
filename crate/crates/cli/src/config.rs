//! Run configuration: one JSON document with a mandatory seed and one
//! section per pipeline stage. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sheaf_ode::graphs::GrangerConfig;
use sheaf_ode::model::ModelConfig;
use sheaf_ode::neurosim::LifParams;
use sheaf_ode::synthetic::WindowConfig;
use sheaf_ode::training::{SchedulerConfig, TrainingConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub prior: GrangerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub n_nodes: usize,
    /// Ring-lattice neighbour count of the small-world graph.
    pub k: usize,
    pub beta: f64,
    pub graph_seed: u64,
    /// Number of network instantiations (each simulated with and without silencing).
    pub count: usize,
    pub lif: LifParams,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_nodes: 100,
            k: 8,
            beta: 0.1,
            graph_seed: 7,
            count: 100,
            lif: LifParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub windows: WindowConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        Self {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lr: t.lr,
            weight_decay: t.weight_decay,
            scheduler: t.scheduler,
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            folds: t.folds,
            windows: WindowConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Write forecasts in source units instead of window-normalized units.
    pub denormalize: bool,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            simulate: SimulateSection::default(),
            prior: GrangerConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// Reads and validates a config file; `seed` overrides the stored seed.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::from_io(p, e))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", p.display())))?;
                if let (Some(s), Some(obj)) = (seed, value.as_object()) {
                    if !obj.contains_key("seed") {
                        let mut obj = obj.clone();
                        obj.insert("seed".into(), s.into());
                        return Self::from_value(serde_json::Value::Object(obj), p);
                    }
                }
                Self::from_value(value, p)?
            }
            None => match seed {
                Some(s) => Self::with_seed(s),
                None => return Err(CliError::Schema("a seed is required: pass --config or --seed".into())),
            },
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_value(value: serde_json::Value, path: &Path) -> Result<Self, CliError> {
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let schema = |e: sheaf_ode::Error| CliError::Schema(e.to_string());
        let s = &self.simulate;
        if s.n_nodes <= s.k || s.k < 2 || s.k % 2 != 0 || !(0.0..=1.0).contains(&s.beta) {
            return Err(CliError::Schema(format!(
                "simulate: need even k >= 2 below n_nodes and beta in [0, 1], got n={} k={} beta={}",
                s.n_nodes, s.k, s.beta
            )));
        }
        s.lif.validate().map_err(schema)?;
        if self.prior.lag_order == 0 || self.prior.top_k == 0 || !(self.prior.ridge >= 0.0) {
            return Err(CliError::Schema("prior: lag_order and top_k must be positive, ridge nonnegative".into()));
        }
        self.model.validate().map_err(schema)?;
        self.training_config().validate().map_err(schema)?;
        let w = &self.train.windows;
        if w.t_ctx == 0 || w.t_hor == 0 || w.stride == 0 {
            return Err(CliError::Schema("train.windows: lengths and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn training_config(&self) -> TrainingConfig {
        let t = &self.train;
        TrainingConfig {
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            lr: t.lr,
            weight_decay: t.weight_decay,
            scheduler: t.scheduler.clone(),
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            folds: t.folds,
            seed: self.seed,
        }
    }

    /// Canonical serialization, the input of the config hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
