use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::signal::{ExcitationSignal, SignalSpec};
use super::ExciteError;
use crate::plants::{
    simulate_sampled, NoiseSpec, PlantError, PlantId, PlantSpec, SampledTrajectory, SimOptions,
};

/// Per-state sampling box for initial conditions of the given plant.
pub fn initial_condition_ranges(spec: &PlantSpec) -> Vec<(f64, f64)> {
    use std::f64::consts::PI;
    match spec.id() {
        PlantId::C1 => vec![(-10.0, 10.0); 2],
        PlantId::C2 => vec![(-10.0, 10.0); 3],
        PlantId::C3 => vec![(-PI, PI), (-3.0, 3.0), (-PI, PI), (-3.0, 3.0)],
        PlantId::Chain => vec![(-1.0, 1.0); spec.dim()],
    }
}

/// One uniform draw inside `ranges`.
pub fn sample_in<R: Rng + ?Sized>(ranges: &[(f64, f64)], rng: &mut R) -> Vec<f64> {
    ranges
        .iter()
        .map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo })
        .collect()
}

/// Uniform initial condition in the plant's reference box.
pub fn sample_initial_condition<R: Rng + ?Sized>(spec: &PlantSpec, rng: &mut R) -> Vec<f64> {
    sample_in(&initial_condition_ranges(spec), rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_traj: usize,
    /// Seconds per trajectory; `duration / period` samples are recorded.
    pub duration: f64,
    pub period: f64,
    #[serde(default)]
    pub ic_ranges: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub substeps: Option<usize>,
}

impl DatasetSpec {
    pub fn new(n_traj: usize, duration: f64, period: f64) -> Self {
        Self {
            n_traj,
            duration,
            period,
            ic_ranges: None,
            substeps: None,
        }
    }

    /// Samples per trajectory; errors unless `duration / period` is integral.
    pub fn samples(&self) -> Result<usize, ExciteError> {
        if !(self.period > 0.0) || !(self.duration > 0.0) {
            return Err(ExciteError::InvalidSpec("duration and period must be positive".into()));
        }
        let ratio = self.duration / self.period;
        let rounded = ratio.round();
        if (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(ExciteError::InvalidSpec(format!(
                "duration {} is not a multiple of period {}",
                self.duration, self.period
            )));
        }
        Ok(rounded as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub index: usize,
    pub file: String,
    pub x0: Vec<f64>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceRecord {
    pub index: usize,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub plant: PlantSpec,
    pub period: f64,
    pub duration: f64,
    pub samples_per_trajectory: usize,
    pub n_requested: usize,
    pub n_traj: usize,
    pub seed: u64,
    pub signal: SignalSpec,
    pub noise: NoiseSpec,
    pub ic_ranges: Vec<(f64, f64)>,
    pub substeps: usize,
    /// SHA-256 of the canonical JSON of the generating parameters.
    pub spec_hash: String,
    pub trajectories: Vec<TrajectoryRecord>,
    pub diverged: Vec<DivergenceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub trajectories: Vec<SampledTrajectory>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn trajectory_csv(traj: &SampledTrajectory) -> Result<Vec<u8>, ExciteError> {
    let mut buf = Vec::new();
    traj.write_csv(&mut buf)?;
    Ok(buf)
}

/// Simulates `spec.n_traj` trajectories from random initial conditions
/// under independent excitation realizations.
///
/// Trajectory `k` draws its initial condition and signal from stream `k` of
/// `seed` and its noise from stream `k` of `noise.seed`, so the result does
/// not depend on scheduling. Diverging trajectories are dropped and
/// recorded; more than 1% divergence fails the whole run.
pub fn generate_dataset(
    plant: &PlantSpec,
    signal: &SignalSpec,
    spec: &DatasetSpec,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<Dataset, ExciteError> {
    plant.validate()?;
    signal.validate()?;
    noise.validate()?;
    let samples = spec.samples()?;
    let ranges = spec.ic_ranges.clone().unwrap_or_else(|| initial_condition_ranges(plant));
    if ranges.len() != plant.dim() {
        return Err(PlantError::Dimension { expected: plant.dim(), found: ranges.len() }.into());
    }
    let substeps = spec.substeps.unwrap_or(1).max(1);
    let signal = SignalSpec { seed, ..signal.clone() };

    let outcomes: Vec<Result<SampledTrajectory, PlantError>> = (0..spec.n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let x0 = sample_in(&ranges, &mut rng);
            let inputs = ExcitationSignal::from_rng(&signal, &mut rng)
                .expect("validated")
                .sample(spec.period, samples);
            simulate_sampled(plant, &x0, &inputs, spec.period, noise, k as u64, SimOptions { substeps })
        })
        .collect();

    let mut trajectories = Vec::new();
    let mut records = Vec::new();
    let mut diverged = Vec::new();
    for (k, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(traj) => {
                let bytes = trajectory_csv(&traj)?;
                records.push(TrajectoryRecord {
                    index: k,
                    file: format!("traj_{k}.csv"),
                    x0: traj.state(0).to_vec(),
                    sha256: sha256_hex(&bytes),
                });
                trajectories.push(traj);
            }
            Err(PlantError::Divergence { t, .. }) => diverged.push(DivergenceRecord { index: k, t }),
            Err(e) => return Err(e.into()),
        }
    }
    if diverged.len() * 100 > spec.n_traj {
        return Err(ExciteError::TooManyDiverged { diverged: diverged.len(), total: spec.n_traj });
    }

    let hashed = serde_json::json!({
        "plant": plant,
        "signal": signal,
        "dataset": spec,
        "noise": noise,
        "seed": seed,
    });
    let manifest = Manifest {
        plant: plant.clone(),
        period: spec.period,
        duration: spec.duration,
        samples_per_trajectory: samples,
        n_requested: spec.n_traj,
        n_traj: trajectories.len(),
        seed,
        signal,
        noise: *noise,
        ic_ranges: ranges,
        substeps,
        spec_hash: sha256_hex(hashed.to_string().as_bytes()),
        trajectories: records,
        diverged,
    };
    Ok(Dataset { manifest, trajectories })
}

impl Dataset {
    /// Builds a dataset from already simulated trajectories.
    pub fn from_trajectories(plant: &PlantSpec, trajectories: Vec<SampledTrajectory>) -> Result<Self, ExciteError> {
        let first = trajectories.first().ok_or_else(|| ExciteError::InvalidSpec("no trajectories".into()))?;
        let period = first.period;
        let mut records = Vec::new();
        for (k, traj) in trajectories.iter().enumerate() {
            if traj.period != period {
                return Err(ExciteError::InvalidSpec("trajectories must share one period".into()));
            }
            if traj.n != plant.dim() {
                return Err(PlantError::Dimension { expected: plant.dim(), found: traj.n }.into());
            }
            records.push(TrajectoryRecord {
                index: k,
                file: format!("traj_{k}.csv"),
                x0: traj.state(0).to_vec(),
                sha256: sha256_hex(&trajectory_csv(traj)?),
            });
        }
        let samples = first.len();
        let manifest = Manifest {
            plant: plant.clone(),
            period,
            duration: samples as f64 * period,
            samples_per_trajectory: samples,
            n_requested: trajectories.len(),
            n_traj: trajectories.len(),
            seed: 0,
            signal: SignalSpec::default(),
            noise: NoiseSpec::none(),
            ic_ranges: initial_condition_ranges(plant),
            substeps: 1,
            spec_hash: String::new(),
            trajectories: records,
            diverged: Vec::new(),
        };
        Ok(Self { manifest, trajectories })
    }

    pub fn dim(&self) -> usize {
        self.manifest.plant.dim()
    }

    pub fn period(&self) -> f64 {
        self.manifest.period
    }

    pub fn pair_count(&self) -> usize {
        self.trajectories.iter().map(SampledTrajectory::len).sum()
    }

    /// Writes `manifest.json` and one `traj_<k>.csv` per trajectory.
    pub fn save(&self, dir: &Path) -> Result<(), ExciteError> {
        fs::create_dir_all(dir)?;
        for (record, traj) in self.manifest.trajectories.iter().zip(&self.trajectories) {
            fs::write(dir.join(&record.file), trajectory_csv(traj)?)?;
        }
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Loads a directory written by [`Dataset::save`], checking file hashes
    /// and counts against the manifest.
    pub fn load(dir: &Path) -> Result<Self, ExciteError> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        manifest.plant.validate()?;
        if manifest.trajectories.len() != manifest.n_traj {
            return Err(ExciteError::Corrupt(format!(
                "manifest lists {} files but n_traj = {}",
                manifest.trajectories.len(),
                manifest.n_traj
            )));
        }
        let mut trajectories = Vec::with_capacity(manifest.n_traj);
        for record in &manifest.trajectories {
            let bytes = fs::read(dir.join(&record.file))?;
            let digest = sha256_hex(&bytes);
            if digest != record.sha256 {
                return Err(ExciteError::Corrupt(format!("hash mismatch for {}", record.file)));
            }
            let traj = SampledTrajectory::read_csv(bytes.as_slice(), manifest.period)?;
            if traj.n != manifest.plant.dim() {
                return Err(PlantError::Dimension { expected: manifest.plant.dim(), found: traj.n }.into());
            }
            trajectories.push(traj);
        }
        Ok(Self { manifest, trajectories })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c1_draws_stay_in_box() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let x = sample_initial_condition(&c1, &mut rng);
            assert!(x.iter().all(|v| v.abs() < 10.0));
        }
    }

    #[test]
    fn c3_draws_respect_angle_and_velocity_ranges() {
        let c3 = PlantSpec::reference(PlantId::C3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let x = sample_initial_condition(&c3, &mut rng);
            assert!(x[0].abs() < std::f64::consts::PI && x[2].abs() < std::f64::consts::PI);
            assert!(x[1].abs() < 3.0 && x[3].abs() < 3.0);
        }
    }

    #[test]
    fn fixed_seed_repeats_draws() {
        let c2 = PlantSpec::reference(PlantId::C2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| sample_initial_condition(&c2, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn desk_scale_pair_count() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let data = generate_dataset(&c1, &SignalSpec::default(), &DatasetSpec::new(10, 2.0, 0.005), &NoiseSpec::none(), 3).unwrap();
        assert_eq!(data.pair_count(), 4000);
        assert_eq!(data.manifest.n_traj, 10);
        assert!(data.manifest.diverged.is_empty());
    }

    #[test]
    fn non_integral_duration_rejected() {
        let spec = DatasetSpec::new(1, 2.0, 0.003);
        assert!(matches!(spec.samples(), Err(ExciteError::InvalidSpec(_))));
    }

    #[test]
    fn divergent_runs_fail_generation() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let signal = SignalSpec { gain: 1e12, ..SignalSpec::default() };
        let err = generate_dataset(&c1, &signal, &DatasetSpec::new(4, 1.0, 0.01), &NoiseSpec::none(), 0).unwrap_err();
        assert!(matches!(err, ExciteError::TooManyDiverged { .. }), "{err}");
    }
}
