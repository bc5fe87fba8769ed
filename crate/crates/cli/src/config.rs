use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flforge_core::evalharness::{ClosedLoopSpec, EvalSet, Pole};
use flforge_core::excite::{DatasetSpec, SignalSpec};
use flforge_core::flmodel::{Architecture, InputLaw, LossConfig, ModelMeta};
use flforge_core::plants::{NoiseSpec, PlantId, PlantSpec};
use flforge_core::trainer::TrainConfig;

use crate::CliError;

/// Reference plant plus optional parameter overrides, e.g.
/// `{"id": "C1", "overrides": {"delta2": 0.0}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub id: PlantId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overrides: Option<serde_json::Map<String, serde_json::Value>>,
}

impl PlantConfig {
    pub fn resolve(&self) -> Result<PlantSpec, CliError> {
        let mut value = serde_json::to_value(PlantSpec::reference(self.id)).expect("plant serializes");
        if let Some(over) = &self.overrides {
            let obj = value.as_object_mut().expect("plant is an object");
            for (k, v) in over {
                if k == "id" {
                    return Err(CliError::Config("plant id cannot be overridden".into()));
                }
                obj.insert(k.clone(), v.clone());
            }
        }
        let spec: PlantSpec =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("plant overrides: {e}")))?;
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_traj: usize,
    pub duration: f64,
    pub ic_ranges: Option<Vec<(f64, f64)>>,
    pub substeps: Option<usize>,
    pub noise: NoiseSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_traj: 10,
            duration: 2.0,
            ic_ranges: None,
            substeps: None,
            noise: NoiseSpec::none(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Measurement,
    Process,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseStudyConfig {
    pub mode: NoiseMode,
    pub variance: f64,
}

impl Default for NoiseStudyConfig {
    fn default() -> Self {
        Self { mode: NoiseMode::Measurement, variance: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub x0: Option<Vec<f64>>,
    pub x_eq: Option<Vec<f64>>,
    pub poles: Option<Vec<Pole>>,
    pub horizon: f64,
    pub threshold: f64,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self { x0: None, x_eq: None, poles: None, horizon: 10.0, threshold: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_traj: usize,
    pub duration: f64,
    /// Seed of the evaluation trajectories; derived from the global seed
    /// when absent.
    pub seed: Option<u64>,
    pub substeps: usize,
    /// Box the single-step samples are restricted to.
    pub single_step_region: Option<Vec<(f64, f64)>>,
    pub noise: NoiseStudyConfig,
    pub closed_loop: ClosedLoopConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let set = EvalSet::default();
        Self {
            n_traj: set.n_traj,
            duration: set.duration,
            seed: None,
            substeps: set.substeps,
            single_step_region: None,
            noise: NoiseStudyConfig::default(),
            closed_loop: ClosedLoopConfig::default(),
        }
    }
}

/// Everything a run needs. Unknown keys are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub plant: PlantConfig,
    /// Sampling period T [s].
    pub period: f64,
    #[serde(default)]
    pub signal: SignalSpec,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: Architecture,
    /// Plant-specific defaults when absent.
    #[serde(default)]
    pub loss: Option<LossConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Offset between the global seed and the evaluation-trajectory seed.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Fills every derived field (plant-specific loss, evaluation seed,
    /// training seed) and validates the result.
    pub fn resolve(mut self) -> Result<Self, CliError> {
        let plant = self.plant.resolve()?;
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(CliError::Config(format!("period must be positive, got {}", self.period)));
        }
        let n = plant.dim();
        let loss = self.loss.take().unwrap_or_else(|| LossConfig::for_plant(&plant));
        loss.validate(n).map_err(|e| CliError::Config(e.to_string()))?;
        self.loss = Some(loss);
        self.train.seed = self.seed;
        if self.train.two_stage {
            self.model.input_law = InputLaw::GammaBeta;
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.signal.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.dataset.noise.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.dataset_spec().samples().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.seed.is_none() {
            self.eval.seed = Some(self.seed.wrapping_add(EVAL_SEED_OFFSET));
        }
        for ranges in [&self.dataset.ic_ranges, &self.eval.single_step_region].into_iter().flatten() {
            if ranges.len() != n {
                return Err(CliError::Config(format!("ranges need {n} entries, got {}", ranges.len())));
            }
        }
        Ok(self)
    }

    pub fn plant_spec(&self) -> Result<PlantSpec, CliError> {
        self.plant.resolve()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            ic_ranges: self.dataset.ic_ranges.clone(),
            substeps: self.dataset.substeps,
            ..DatasetSpec::new(self.dataset.n_traj, self.dataset.duration, self.period)
        }
    }

    pub fn model_meta(&self) -> Result<ModelMeta, CliError> {
        let plant = self.plant_spec()?;
        Ok(ModelMeta {
            n: plant.dim(),
            plant,
            period: self.period,
            seed: self.seed,
            architecture: self.model.clone(),
            loss: self.loss.clone().expect("resolved config"),
        })
    }

    pub fn eval_set(&self) -> EvalSet {
        EvalSet {
            n_traj: self.eval.n_traj,
            duration: self.eval.duration,
            seed: self.eval.seed.unwrap_or(self.seed.wrapping_add(EVAL_SEED_OFFSET)),
            signal: self.signal.clone(),
            ic_ranges: self.dataset.ic_ranges.clone(),
            substeps: self.eval.substeps,
        }
    }

    /// Closed-loop setup; the equilibrium defaults to the origin, the start
    /// to `(2, …, 2)` and the poles to `0.95, 0.9, 0.85, …`.
    pub fn closed_loop(&self, n: usize) -> (Vec<f64>, ClosedLoopSpec) {
        let c = &self.eval.closed_loop;
        let x0 = c.x0.clone().unwrap_or_else(|| vec![2.0; n]);
        let poles = c
            .poles
            .clone()
            .unwrap_or_else(|| (0..n).map(|i| Pole::real(0.95 - 0.05 * i as f64)).collect());
        let spec = ClosedLoopSpec {
            x_eq: c.x_eq.clone().unwrap_or_else(|| vec![0.0; n]),
            poles,
            horizon: c.horizon,
            threshold: c.threshold,
        };
        (x0, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"plant": {"id": "C1"}, "period": 0.005}"#
    }

    #[test]
    fn minimal_config_resolves() {
        let cfg = RunConfig::from_json(minimal()).unwrap().resolve().unwrap();
        assert_eq!(cfg.loss, Some(LossConfig::for_plant(&PlantSpec::reference(PlantId::C1))));
        assert_eq!(cfg.eval.seed, Some(EVAL_SEED_OFFSET));
        assert_eq!(cfg.dataset.n_traj, 10);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"plant": {"id": "C1"}, "period": 0.005, "epochs": 3}"#;
        assert!(matches!(RunConfig::from_json(text), Err(CliError::Config(_))));
        let nested = r#"{"plant": {"id": "C1"}, "period": 0.005, "train": {"epoch": 3}}"#;
        assert!(matches!(RunConfig::from_json(nested), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_apply_and_are_checked() {
        let text = r#"{"plant": {"id": "C1", "overrides": {"delta2": 0.5}}, "period": 0.005}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        let PlantSpec::C1(p) = cfg.plant_spec().unwrap() else { panic!() };
        assert_eq!(p.delta2, 0.5);
        assert_eq!(p.delta1, -0.25);
        let bad = r#"{"plant": {"id": "C1", "overrides": {"mass": 1.0}}, "period": 0.005}"#;
        assert!(RunConfig::from_json(bad).unwrap().resolve().is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let cfg = RunConfig::from_json(minimal()).unwrap().resolve().unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.clone().resolve().unwrap(), cfg);
    }

    #[test]
    fn non_integral_duration_is_a_config_error() {
        let text = r#"{"plant": {"id": "C1"}, "period": 0.003, "dataset": {"duration": 0.01}}"#;
        assert!(matches!(RunConfig::from_json(text).unwrap().resolve(), Err(CliError::Config(_))));
    }

    #[test]
    fn two_stage_selects_gamma_beta_law() {
        let text = r#"{"plant": {"id": "C1"}, "period": 0.005, "train": {"two_stage": true}}"#;
        let cfg = RunConfig::from_json(text).unwrap().resolve().unwrap();
        assert_eq!(cfg.model.input_law, InputLaw::GammaBeta);
    }
}
