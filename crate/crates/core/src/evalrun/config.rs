use std::fmt;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::attack::AttackConfig;
use crate::detect::DefenseConfig;
use crate::graphdata::{SyntheticSpec, DEFAULT_LEVELS};
use crate::recmodel::RecConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Metac,
    Random,
    Average,
    Popular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    /// Plain joint training with the supervised detector.
    None,
    Pdr,
    RemoveAnomaly,
    AdvTraining,
}

macro_rules! display_via_serde {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().unwrap_or_default())
            }
        }
    };
}
display_via_serde!(AttackKind);
display_via_serde!(DefenseKind);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Edge file, when `source = "csv"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub levels: u8,
    pub min_degree: usize,
    pub test_frac: f64,
    pub synthetic: SyntheticSpec,
    /// Generate a fresh synthetic graph per run seed instead of using
    /// `synthetic.seed` for all runs.
    pub reseed_synthetic: bool,
    /// Draw targets only among items whose degree is at least the median.
    pub median_targets: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            levels: DEFAULT_LEVELS,
            min_degree: 2,
            test_frac: 0.2,
            synthetic: SyntheticSpec::default(),
            reseed_synthetic: true,
            median_targets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Full-batch gradient steps per epoch.
    pub steps_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            steps_per_epoch: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub attack: AttackKind,
    pub defense: DefenseKind,
    pub tau: f64,
    pub hr_k: Vec<usize>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub rec: RecConfig,
    pub detector: DefenseConfig,
    pub injection: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            attack: AttackKind::Metac,
            defense: DefenseKind::None,
            tau: 0.3,
            hr_k: vec![10, 50],
            seeds: vec![1, 2, 3, 4, 5],
            data: DataConfig::default(),
            train: TrainConfig::default(),
            rec: RecConfig::default(),
            detector: DefenseConfig::default(),
            injection: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if !(0.0..=1.0).contains(&self.tau) {
            return bad(format!("tau {} outside [0, 1]", self.tau));
        }
        if self.hr_k.is_empty() || self.hr_k.contains(&0) {
            return bad("hr_k needs positive entries".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.data.source == DataSource::Csv && self.data.path.is_none() {
            return bad("data.path is required for csv data".into());
        }
        if self.data.levels < 2 || self.data.min_degree == 0 {
            return bad("data.levels must be at least 2 and data.min_degree at least 1".into());
        }
        if self.train.steps_per_epoch == 0 {
            return bad("train.steps_per_epoch must be at least 1".into());
        }
        if self.rec.dim == 0 || self.rec.hidden == 0 || !(self.rec.lr > 0.0) || !(self.rec.lambda >= 0.0) {
            return bad("rec.dim, rec.hidden and rec.lr must be positive, rec.lambda non-negative".into());
        }
        self.detector.validate()?;
        self.injection.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate()?;
        }
        Ok(())
    }
}
