use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::linear::{pole_place, Pole};
use super::EvalError;
use crate::flmodel::Linearization;
use crate::plants::{rk4_step, PlantError, PlantSpec, SampledTrajectory};

/// Pole-placement regulation to an equilibrium through the learned
/// linearization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClosedLoopSpec {
    pub x_eq: Vec<f64>,
    pub poles: Vec<Pole>,
    /// Simulated time [s].
    pub horizon: f64,
    /// `‖x − x_eq‖` below which the state counts as settled.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    0.1
}

impl ClosedLoopSpec {
    pub fn validate(&self, n: usize) -> Result<(), EvalError> {
        if self.x_eq.len() != n || self.poles.len() != n {
            return Err(EvalError::Config(format!(
                "closed loop needs {n} equilibrium entries and {n} poles, got {} and {}",
                self.x_eq.len(),
                self.poles.len()
            )));
        }
        if !(self.horizon >= 0.0) || !(self.threshold > 0.0) {
            return Err(EvalError::Config("horizon must be ≥ 0 and threshold > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// First sample time with `‖x − x_eq‖ < threshold`.
    pub settling_time: Option<f64>,
    pub final_norm: f64,
    /// Time at which the plant simulation blew up, if it did.
    pub diverged_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopMetrics {
    pub k: Vec<f64>,
    pub poles: Vec<Pole>,
    pub x0: Vec<f64>,
    pub x_eq: Vec<f64>,
    pub threshold: f64,
    pub period: f64,
    pub controlled: RunMetrics,
    /// The same start under `v = 0`.
    pub reference: RunMetrics,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopOutcome {
    pub controlled: SampledTrajectory,
    pub reference: SampledTrajectory,
    pub metrics: ClosedLoopMetrics,
}

/// Runs the true plant under `u = α(x) + β(x)·K(φ(x) − φ(x_eq))`, with `u`
/// recomputed every `period` and held in between. Divergence ends the run
/// early and is recorded in the metrics.
pub fn run_feedback<M: Linearization<f64>>(
    model: &M,
    plant: &PlantSpec,
    x0: &[f64],
    x_eq: &[f64],
    k: &[f64],
    period: f64,
    steps: usize,
    threshold: f64,
) -> Result<(SampledTrajectory, RunMetrics), EvalError> {
    plant.check_dim(x0.len())?;
    let z_eq = model.phi(x_eq);
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut states = x.clone();
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut diverged_at = None;
    for i in 0..steps {
        let z = model.phi(&x);
        let v: f64 = k.iter().zip(z.iter().zip(&z_eq)).map(|(ki, (a, b))| ki * (a - b)).sum();
        let u = model.control(&x, v);
        inputs.push(u);
        let next = if u.is_finite() {
            rk4_step(plant, &x, u, period)
        } else {
            Err(PlantError::Divergence { t: 0.0, x: x.clone() })
        };
        match next {
            Ok(next) => {
                x = next;
                states.extend_from_slice(&x);
            }
            Err(PlantError::Divergence { .. }) => {
                diverged_at = Some((i + 1) as f64 * period);
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    let len = states.len() / n;
    // the input column of the final sample repeats the last applied input
    inputs.push(inputs.last().copied().unwrap_or(0.0));
    inputs.truncate(len);
    let traj = SampledTrajectory { period, t0: 0.0, n, inputs, states };
    let dist = |k: usize| traj.state(k).iter().zip(x_eq).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let metrics = RunMetrics {
        settling_time: (0..len).find(|&k| dist(k) < threshold).map(|k| k as f64 * period),
        final_norm: dist(len - 1),
        diverged_at,
    };
    Ok((traj, metrics))
}

/// Places the poles of the learned pair, then regulates the true plant
/// from `x0` with and without the feedback.
pub fn closed_loop_sim<M: Linearization<f64>>(
    model: &M,
    plant: &PlantSpec,
    x0: &[f64],
    spec: &ClosedLoopSpec,
    period: f64,
) -> Result<ClosedLoopOutcome, EvalError> {
    let n = model.n();
    spec.validate(n)?;
    if plant.dim() != n {
        return Err(EvalError::Mismatch(format!("model has n = {n}, plant has n = {}", plant.dim())));
    }
    let a = model.a();
    let poles: Vec<Complex64> = spec.poles.iter().map(|&p| p.into()).collect();
    let k = pole_place(&a, &model.b(), &poles)?;
    let steps = (spec.horizon / period).round() as usize;
    let (controlled, c) = run_feedback(model, plant, x0, &spec.x_eq, &k, period, steps, spec.threshold)?;
    let zero = vec![0.0; n];
    let (reference, r) = run_feedback(model, plant, x0, &spec.x_eq, &zero, period, steps, spec.threshold)?;
    Ok(ClosedLoopOutcome {
        controlled,
        reference,
        metrics: ClosedLoopMetrics {
            k,
            poles: spec.poles.clone(),
            x0: x0.to_vec(),
            x_eq: spec.x_eq.clone(),
            threshold: spec.threshold,
            period,
            controlled: c,
            reference: r,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flmodel::ModelParameters;

    fn chain_model(period: f64) -> ModelParameters {
        crate::flmodel::exact_chain_model(2, period)
    }

    fn spec() -> ClosedLoopSpec {
        ClosedLoopSpec {
            x_eq: vec![0.0, 0.0],
            poles: vec![Pole::real(0.95), Pole::real(0.9)],
            horizon: 5.0,
            threshold: 0.1,
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let p = chain_model(0.05);
        let out = closed_loop_sim(&p.view(), &PlantSpec::Chain { n: 2 }, &[0.0, 0.0], &spec(), 0.05).unwrap();
        assert!(out.controlled.states.iter().all(|&v| v == 0.0));
        assert_eq!(out.metrics.controlled.settling_time, Some(0.0));
    }

    #[test]
    fn zero_gain_matches_reference_run() {
        let p = chain_model(0.05);
        let plant = PlantSpec::Chain { n: 2 };
        let (a, _) = run_feedback(&p.view(), &plant, &[1.0, -0.5], &[0.0, 0.0], &[0.0, 0.0], 0.05, 40, 0.1).unwrap();
        let out = closed_loop_sim(&p.view(), &plant, &[1.0, -0.5], &ClosedLoopSpec { horizon: 2.0, ..spec() }, 0.05).unwrap();
        assert_eq!(a.states, out.reference.states);
        assert_eq!(a.inputs, out.reference.inputs);
    }

    #[test]
    fn placement_regulates_double_integrator() {
        // identity φ, α = 0, β = 1 on an exact chain model
        let p = chain_model(0.05);
        let out = closed_loop_sim(&p.view(), &PlantSpec::Chain { n: 2 }, &[2.0, 2.0], &spec(), 0.05).unwrap();
        let m = &out.metrics;
        assert!(m.controlled.settling_time.is_some());
        assert!(m.controlled.final_norm < 0.1);
        // without feedback the chain drifts away at constant velocity
        assert!(m.reference.settling_time.is_none());
        assert_eq!(out.controlled.len(), 101);
    }

    #[test]
    fn mismatched_spec_rejected() {
        let p = chain_model(0.05);
        let bad = ClosedLoopSpec { poles: vec![Pole::real(0.5)], ..spec() };
        assert!(matches!(
            closed_loop_sim(&p.view(), &PlantSpec::Chain { n: 2 }, &[0.0, 0.0], &bad, 0.05),
            Err(EvalError::Config(_))
        ));
    }
}
