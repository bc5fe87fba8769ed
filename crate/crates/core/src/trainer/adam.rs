use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Entries with `frozen[i] == true` are
/// left untouched, moments included.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
    frozen: Option<&[bool]>,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient { step: state.step + 1, index: i });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Scales `grads` in place to Euclidean norm at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s, &AdamConfig::default(), None).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![0.0, 0.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.5, -40.0], &mut s, &AdamConfig::default(), None).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
        assert!((p[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut p = vec![1.0, 1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[1.0, 1.0], &mut s, &AdamConfig::default(), Some(&[true, false])).unwrap();
        assert_eq!(p[0], 1.0);
        assert_eq!(s.m[0], 0.0);
        assert!(p[1] < 1.0);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut s, &AdamConfig::default(), None).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { index: 0, .. }));
        assert_eq!(p[0], 0.0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![30.0, 40.0];
        assert_eq!(clip_norm(&mut g, 10.0), 50.0);
        assert!((g[0] - 6.0).abs() < 1e-12 && (g[1] - 8.0).abs() < 1e-12);
        let mut small = vec![0.1, 0.2];
        clip_norm(&mut small, 10.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }
}
