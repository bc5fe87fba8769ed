use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{EvaluationReport, Variant};
use super::EvalError;
use crate::analytic::{analytic_rollout, NominalModel};
use crate::excite::{initial_condition_ranges, sample_in, ExcitationSignal, SignalSpec};
use crate::flmodel::{predict_step, rollout_open_loop, Linearization};
use crate::plants::{simulate_sampled, simulate_with_truth, NoiseSpec, PlantError, PlantSpec, SampledTrajectory, SimOptions};

/// How fresh evaluation trajectories are drawn. Initial conditions and
/// inputs follow the training recipe under a separate seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSet {
    pub n_traj: usize,
    pub duration: f64,
    pub seed: u64,
    pub signal: SignalSpec,
    pub ic_ranges: Option<Vec<(f64, f64)>>,
    pub substeps: usize,
}

impl Default for EvalSet {
    fn default() -> Self {
        Self {
            n_traj: 50,
            duration: 2.0,
            seed: 1_000_003,
            signal: SignalSpec::default(),
            ic_ranges: None,
            substeps: 10,
        }
    }
}

/// Evaluation trajectories: what a sensor recorded and what the plant did.
#[derive(Debug, Clone)]
pub struct EvalTrajectories {
    pub plant: PlantSpec,
    pub period: f64,
    pub noise: NoiseSpec,
    pub measured: Vec<SampledTrajectory>,
    pub truth: Vec<SampledTrajectory>,
    /// Streams whose simulation diverged and were replaced.
    pub skipped: Vec<u64>,
}

/// Simulates `set.n_traj` trajectories; a diverging draw is skipped and the
/// next stream used instead, up to `n_traj` replacements.
pub fn fresh_trajectories(
    plant: &PlantSpec,
    period: f64,
    set: &EvalSet,
    noise: &NoiseSpec,
) -> Result<EvalTrajectories, EvalError> {
    plant.validate()?;
    set.signal.validate()?;
    noise.validate()?;
    if !(period > 0.0) || !(set.duration >= 0.0) {
        return Err(EvalError::Config("period must be positive and duration non-negative".into()));
    }
    let steps = (set.duration / period).round();
    if (steps * period - set.duration).abs() > 1e-9 * set.duration.max(1.0) {
        return Err(EvalError::Config(format!(
            "duration {} is not a multiple of the period {period}",
            set.duration
        )));
    }
    let samples = steps as usize + 1;
    let ranges = set.ic_ranges.clone().unwrap_or_else(|| initial_condition_ranges(plant));
    if ranges.len() != plant.dim() {
        return Err(PlantError::Dimension { expected: plant.dim(), found: ranges.len() }.into());
    }
    let signal = SignalSpec { seed: set.seed, ..set.signal.clone() };
    let opts = SimOptions { substeps: set.substeps.max(1) };
    let mut out = EvalTrajectories {
        plant: plant.clone(),
        period,
        noise: *noise,
        measured: Vec::with_capacity(set.n_traj),
        truth: Vec::with_capacity(set.n_traj),
        skipped: Vec::new(),
    };
    let mut stream = 0u64;
    while out.measured.len() < set.n_traj {
        if out.skipped.len() > set.n_traj {
            return Err(EvalError::Config(format!("{} evaluation trajectories diverged", out.skipped.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(set.seed);
        rng.set_stream(stream);
        let x0 = sample_in(&ranges, &mut rng);
        let inputs = ExcitationSignal::from_rng(&signal, &mut rng)?.sample(period, samples);
        match simulate_with_truth(plant, &x0, &inputs, period, noise, stream, opts) {
            Ok((measured, truth)) => {
                out.measured.push(measured);
                out.truth.push(truth);
            }
            Err(PlantError::Divergence { .. }) => out.skipped.push(stream),
            Err(e) => return Err(e.into()),
        }
        stream += 1;
    }
    Ok(out)
}

fn abs_errors(pred: &[Vec<f64>], truth: &SampledTrajectory) -> Vec<Vec<f64>> {
    pred.iter()
        .enumerate()
        .map(|(k, x)| x.iter().zip(truth.state(k + 1)).map(|(p, q)| (p - q).abs()).collect())
        .collect()
}

/// Open-loop rollouts of the learned model from each recorded initial
/// state, with `v` computed from the predicted state.
pub fn evaluate_learned<M: Linearization<f64> + Sync>(
    model: &M,
    set: &EvalTrajectories,
) -> Result<EvaluationReport, EvalError> {
    if model.n() != set.plant.dim() {
        return Err(EvalError::Mismatch(format!(
            "model has n = {}, plant {} has n = {}",
            model.n(),
            set.plant.id(),
            set.plant.dim()
        )));
    }
    let errors = set
        .measured
        .par_iter()
        .zip(&set.truth)
        .map(|(m, t)| Ok(abs_errors(&rollout_open_loop(model, m.state(0), &m.inputs)?, t)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(EvaluationReport::from_errors(
        Variant::Learned,
        set.plant.id(),
        set.period,
        set.plant.dim(),
        set.noise,
        errors,
    ))
}

/// Rollouts of an analytic linearization from each recorded initial state.
pub fn evaluate_analytic(
    model: &NominalModel,
    variant: Variant,
    set: &EvalTrajectories,
) -> Result<EvaluationReport, EvalError> {
    if model.n() != set.plant.dim() {
        return Err(EvalError::Mismatch("analytic model dimension differs from plant".into()));
    }
    let errors = set
        .measured
        .par_iter()
        .zip(&set.truth)
        .map(|(m, t)| Ok(abs_errors(&analytic_rollout(model, m.state(0), &m.inputs, set.period)?, t)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(EvaluationReport::from_errors(variant, set.plant.id(), set.period, set.plant.dim(), set.noise, errors))
}

/// Drift comparison of the learned model and analytic baselines on fresh
/// trajectories. Errors are measured against the noise-free plant state.
pub fn rollout_eval<M: Linearization<f64> + Sync>(
    model: &M,
    plant: &PlantSpec,
    period: f64,
    set: &EvalSet,
    noise: &NoiseSpec,
    variants: &[Variant],
) -> Result<Vec<EvaluationReport>, EvalError> {
    let trajectories = fresh_trajectories(plant, period, set, noise)?;
    variants
        .iter()
        .map(|&v| match v {
            Variant::Learned => evaluate_learned(model, &trajectories),
            Variant::AnalyticExact => evaluate_analytic(&NominalModel::exact(plant)?, v, &trajectories),
            Variant::AnalyticPerturbed => {
                evaluate_analytic(&NominalModel::documented_perturbation(plant)?, v, &trajectories)
            }
        })
        .collect()
}

/// [`rollout_eval`] under noise, against the exact-parameter baseline.
pub fn noise_eval<M: Linearization<f64> + Sync>(
    model: &M,
    plant: &PlantSpec,
    period: f64,
    set: &EvalSet,
    noise: &NoiseSpec,
) -> Result<Vec<EvaluationReport>, EvalError> {
    rollout_eval(model, plant, period, set, noise, &[Variant::Learned, Variant::AnalyticExact])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleStepSample {
    pub x: Vec<f64>,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleStepReport {
    pub samples: Vec<SingleStepSample>,
    /// `|x̂(T) − x(T)|` per sample and state.
    pub errors: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub max: Vec<f64>,
}

impl SingleStepReport {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), EvalError> {
        let n = self.mean.len();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.push("u".into());
        header.extend((1..=n).map(|i| format!("err{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (s, e) in self.samples.iter().zip(&self.errors) {
            let row: Vec<String> = s
                .x
                .iter()
                .chain(std::iter::once(&s.u))
                .chain(e)
                .map(|&v| crate::plants::fmt17(v))
                .collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// One model step against one plant step (ZOH over `period`) from each sample.
pub fn single_step_eval<M: Linearization<f64> + Sync>(
    model: &M,
    plant: &PlantSpec,
    samples: &[SingleStepSample],
    period: f64,
    substeps: usize,
) -> Result<SingleStepReport, EvalError> {
    let n = plant.dim();
    if model.n() != n {
        return Err(EvalError::Mismatch(format!("model has n = {}, plant has n = {n}", model.n())));
    }
    let opts = SimOptions { substeps: substeps.max(1) };
    let errors = samples
        .par_iter()
        .map(|s| {
            let pred = predict_step(model, &s.x, s.u)?;
            let truth = simulate_sampled(plant, &s.x, &[s.u, s.u], period, &NoiseSpec::none(), 0, opts)?;
            Ok(pred.iter().zip(truth.state(1)).map(|(p, q)| (p - q).abs()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, EvalError>>()?;
    let count = errors.len().max(1) as f64;
    let mean = (0..n).map(|d| errors.iter().map(|e| e[d]).sum::<f64>() / count).collect();
    let max = (0..n).map(|d| errors.iter().map(|e| e[d]).fold(0.0, f64::max)).collect();
    Ok(SingleStepReport { samples: samples.to_vec(), errors, mean, max })
}

/// Every noise-free `(x_k, u_k)` of the trajectories whose state lies in
/// `region` (all of them when `None`).
pub fn held_out_samples(set: &EvalTrajectories, region: Option<&[(f64, f64)]>) -> Vec<SingleStepSample> {
    let inside = |x: &[f64]| region.is_none_or(|r| x.iter().zip(r).all(|(v, &(lo, hi))| *v >= lo && *v <= hi));
    set.truth
        .iter()
        .flat_map(|t| (0..t.len().saturating_sub(1)).map(move |k| (t, k)))
        .filter(|(t, k)| inside(t.state(*k)))
        .map(|(t, k)| SingleStepSample { x: t.state(k).to_vec(), u: t.inputs[k] })
        .collect()
}

/// `points` samples along coordinate `dim` through `base`, evenly spaced on
/// `range`, all with input `u`.
pub fn sweep_samples(base: &[f64], dim: usize, range: (f64, f64), points: usize, u: f64) -> Vec<SingleStepSample> {
    (0..points)
        .map(|i| {
            let s = if points > 1 { i as f64 / (points - 1) as f64 } else { 0.5 };
            let mut x = base.to_vec();
            x[dim] = range.0 + s * (range.1 - range.0);
            SingleStepSample { x, u }
        })
        .collect()
}
