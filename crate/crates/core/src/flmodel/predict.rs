use serde::{Deserialize, Serialize};

use super::model::Linearization;
use super::ModelError;
use crate::diffcore::Scalar;
use crate::excite::Window;

/// Where `v(t_i)` takes its state from during a multi-step prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    /// From the measured `x(t_i)`, as in the training recursion.
    #[default]
    Measured,
    /// From the model's own prediction `x̂(t_i)`; pure open-loop simulation.
    OpenLoop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    /// `x̂(t_{j+1}) … x̂(t_{j+m})`.
    pub states: Vec<Vec<S>>,
    /// `v(t_j) … v(t_{j+m})`; the last entry does not drive the recursion.
    pub v: Vec<S>,
}

fn lift_all<S: Scalar, L: Linearization<S>>(model: &L, x: &[f64]) -> Vec<S> {
    x.iter().map(|&c| model.lift(c)).collect()
}

/// Rolls `z⁺ = A z + B v` forward from `z = φ(x0)` for `inputs.len() − 1`
/// steps. In measured mode `measured` holds the states `x(t_0..)` feeding
/// the input law.
fn run<S: Scalar, L: Linearization<S>>(
    model: &L,
    x0: &[f64],
    inputs: &[f64],
    measured: Option<&[f64]>,
) -> Result<Prediction<S>, ModelError> {
    let n = model.n();
    if x0.len() != n {
        return Err(ModelError::Dimension { expected: n, found: x0.len() });
    }
    let steps = inputs.len().saturating_sub(1);
    let a = model.a();
    let b = model.b();
    let x_first = lift_all(model, x0);
    let mut z = model.phi(&x_first);
    let mut states = Vec::with_capacity(steps);
    let mut v = Vec::with_capacity(steps + 1);
    let mut current = x_first;
    for (i, &u) in inputs.iter().enumerate() {
        if let Some(xs) = measured {
            current = lift_all(model, &xs[i * n..(i + 1) * n]);
        }
        let vi = model.input_transform(&current, model.lift(u));
        v.push(vi);
        if i == steps {
            break;
        }
        let az = a.matvec(&z);
        z = az.into_iter().zip(&b).map(|(zi, &bi)| zi + bi * vi).collect();
        let x_hat = model.phi_inverse(&z)?;
        if measured.is_none() {
            current = x_hat.clone();
        }
        states.push(x_hat);
    }
    Ok(Prediction { states, v })
}

/// Prediction over a window.
pub fn predict_window<S: Scalar, L: Linearization<S>>(
    model: &L,
    window: &Window<'_>,
    mode: RolloutMode,
) -> Result<Prediction<S>, ModelError> {
    if window.n != model.n() {
        return Err(ModelError::Dimension { expected: model.n(), found: window.n });
    }
    let measured = match mode {
        RolloutMode::Measured => Some(window.states),
        RolloutMode::OpenLoop => None,
    };
    run(model, window.state(0), window.inputs, measured)
}

/// Open-loop prediction from `x0` under `inputs` (one per sample);
/// returns `x̂(t_1) … x̂(t_{len−1})`.
pub fn rollout_open_loop<L: Linearization<f64>>(
    model: &L,
    x0: &[f64],
    inputs: &[f64],
) -> Result<Vec<Vec<f64>>, ModelError> {
    Ok(run(model, x0, inputs, None)?.states)
}

/// One prediction step from `x` under `u`.
pub fn predict_step<L: Linearization<f64>>(model: &L, x: &[f64], u: f64) -> Result<Vec<f64>, ModelError> {
    let mut states = run(model, x, &[u, 0.0], None)?.states;
    Ok(states.pop().expect("one step"))
}
