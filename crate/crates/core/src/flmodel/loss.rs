use serde::{Deserialize, Serialize};

use super::model::Linearization;
use super::predict::{predict_window, RolloutMode};
use super::ModelError;
use crate::diffcore::{Matrix, Scalar};
use crate::excite::Window;
use crate::plants::{PlantId, PlantSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// β clamp.
    pub eps1: f64,
    /// Floor on |det Γ| and |det W_l|.
    pub eps2: f64,
    /// Dead zone of |v|.
    pub eps3: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub a_w: f64,
    /// Per-state weights of the prediction error; `None` means all ones.
    pub state_weights: Option<Vec<f64>>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps1: 1e-2,
            eps2: 1e-4,
            eps3: 10.0,
            a1: 1.0,
            a2: 1e-3,
            a3: 1e-3,
            a4: 0.0,
            a_w: 1e-3,
            state_weights: None,
        }
    }
}

impl LossConfig {
    /// Defaults, with angle states weighted 4× for the flexible joint.
    pub fn for_plant(spec: &PlantSpec) -> Self {
        let state_weights = (spec.id() == PlantId::C3).then(|| vec![4.0, 1.0, 4.0, 1.0]);
        Self { state_weights, ..Self::default() }
    }

    pub fn validate(&self, n: usize) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        for (name, v) in [("eps1", self.eps1), ("eps2", self.eps2), ("eps3", self.eps3)] {
            if !(v > 0.0) || !v.is_finite() {
                return err(&format!("{name} must be positive and finite"));
            }
        }
        for (name, v) in [("a1", self.a1), ("a2", self.a2), ("a3", self.a3), ("a4", self.a4), ("a_w", self.a_w)] {
            if !(v >= 0.0) || !v.is_finite() {
                return err(&format!("{name} must be ≥ 0 and finite"));
            }
        }
        if let Some(w) = &self.state_weights {
            if w.len() != n {
                return Err(ModelError::Dimension { expected: n, found: w.len() });
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return err("state weights must be ≥ 0 and finite");
            }
        }
        Ok(())
    }

    /// Soft problems that do not prevent training.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.a2 >= self.a1 || self.a3 >= self.a1 {
            out.push(format!("a2 = {}, a3 = {} are not small against a1 = {}", self.a2, self.a3, self.a1));
        }
        if self.eps1 >= 1.0 || self.eps2 >= 1.0 {
            out.push("eps1 and eps2 are expected in (0, 1)".into());
        }
        out
    }

    pub fn weights(&self, n: usize) -> Vec<f64> {
        self.state_weights.clone().unwrap_or_else(|| vec![1.0; n])
    }
}

/// Weighted prediction error `(1/m) Σ_{i=1..m} Σ_d w_d (x̂_d − x_d)²`.
pub fn loss_l1<S: Scalar>(window: &Window<'_>, predicted: &[Vec<S>], weights: &[f64]) -> S {
    assert_eq!(predicted.len(), window.m, "prediction length must equal m");
    let mut total: Option<S> = None;
    for (i, x_hat) in predicted.iter().enumerate() {
        for ((&xh, &x), &w) in x_hat.iter().zip(window.state(i + 1)).zip(weights) {
            let d = xh - x;
            let term = d * d * w;
            total = Some(match total {
                Some(acc) => acc + term,
                None => term,
            });
        }
    }
    total.expect("m ≥ 1") / window.m as f64
}

/// Columns `B, AB, …, A^{n−1}B`.
pub fn controllability_matrix<S: Scalar>(a: &Matrix<S>, b: &[S]) -> Matrix<S> {
    let n = b.len();
    let mut columns = vec![b.to_vec()];
    for _ in 1..n {
        let next = a.matvec(columns.last().expect("non-empty"));
        columns.push(next);
    }
    Matrix::from_columns(&columns)
}

/// `1 / min(|det M|, eps)`; `+∞` when `M` is singular.
pub fn inverse_det_floor<S: Scalar>(det: S, eps: f64) -> S {
    det.abs().min_c(eps).recip()
}

/// Controllability penalty, with `det Γ`.
pub fn loss_l2<S: Scalar>(a: &Matrix<S>, b: &[S], eps2: f64) -> Result<(S, S), ModelError> {
    let det = controllability_matrix(a, b).det()?;
    Ok((inverse_det_floor(det, eps2), det))
}

/// `(1/m) Σ max(|v_i|, ε₃)`.
pub fn loss_l3<S: Scalar>(v: &[S], eps3: f64) -> S {
    assert!(!v.is_empty());
    let mut acc = v[0].abs().max_c(eps3);
    for &vi in &v[1..] {
        acc = acc + vi.abs().max_c(eps3);
    }
    acc / v.len() as f64
}

/// `||det A| − 1|`.
pub fn loss_l4<S: Scalar>(a: &Matrix<S>) -> Result<S, ModelError> {
    Ok((a.det()?.abs() - 1.0).abs())
}

/// Invertibility penalty of the affine output layer, with `det W_l`.
pub fn loss_wl<S: Scalar>(w_l: &Matrix<S>, eps2: f64) -> Result<(S, S), ModelError> {
    let det = w_l.det()?;
    Ok((inverse_det_floor(det, eps2), det))
}

/// Unweighted loss terms and diagnostics, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub lw: f64,
    pub total: f64,
    pub det_gamma: f64,
    pub det_wl: f64,
    pub max_v: f64,
}

/// Window-independent terms: `(ℒ₂, ℒ₄, loss_wl, det Γ, det W_l)`.
pub fn pair_terms<S: Scalar, L: Linearization<S>>(
    model: &L,
    w_l: &Matrix<S>,
    cfg: &LossConfig,
) -> Result<[S; 5], ModelError> {
    let a = model.a();
    let (l2, det_gamma) = loss_l2(&a, &model.b(), cfg.eps2)?;
    let l4 = loss_l4(&a)?;
    let (lw, det_wl) = loss_wl(w_l, cfg.eps2)?;
    Ok([l2, l4, lw, det_gamma, det_wl])
}

fn weighted<S: Scalar>(terms: &[(f64, S)]) -> S {
    let mut acc: Option<S> = None;
    for &(w, t) in terms {
        // zero weights drop the term so an infinite sentinel cannot become NaN
        if w == 0.0 {
            continue;
        }
        let term = t * w;
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    acc.unwrap_or_else(|| terms[0].1.lift(0.0))
}

/// Mean total loss over `windows`. `ℒ₁` and `ℒ₃` are averaged across
/// windows; the remaining terms do not depend on data.
pub fn batch_loss<S: Scalar, L: Linearization<S>>(
    model: &L,
    w_l: &Matrix<S>,
    windows: &[Window<'_>],
    cfg: &LossConfig,
) -> Result<(S, LossBreakdown), ModelError> {
    assert!(!windows.is_empty(), "empty batch");
    let weights = cfg.weights(model.n());
    let [l2, l4, lw, det_gamma, det_wl] = pair_terms(model, w_l, cfg)?;
    let mut l1_sum: Option<S> = None;
    let mut l3_sum: Option<S> = None;
    let mut max_v = 0.0_f64;
    for w in windows {
        let pred = predict_window(model, w, RolloutMode::Measured)?;
        let l1 = loss_l1(w, &pred.states, &weights);
        let used = &pred.v[1..];
        let l3 = loss_l3(used, cfg.eps3);
        max_v = used.iter().fold(max_v, |m, v| m.max(v.value().abs()));
        l1_sum = Some(l1_sum.map_or(l1, |s| s + l1));
        l3_sum = Some(l3_sum.map_or(l3, |s| s + l3));
    }
    let count = windows.len() as f64;
    let l1 = l1_sum.expect("non-empty") / count;
    let l3 = l3_sum.expect("non-empty") / count;
    let total = weighted(&[(cfg.a1, l1), (cfg.a2, l2), (cfg.a3, l3), (cfg.a4, l4), (cfg.a_w, lw)]);
    let breakdown = LossBreakdown {
        l1: l1.value(),
        l2: l2.value(),
        l3: l3.value(),
        l4: l4.value(),
        lw: lw.value(),
        total: total.value(),
        det_gamma: det_gamma.value(),
        det_wl: det_wl.value(),
        max_v,
    };
    Ok((total, breakdown))
}

/// Total loss of one window.
pub fn total_loss<S: Scalar>(
    model: &super::model::ModelView<'_, S>,
    window: &Window<'_>,
    cfg: &LossConfig,
) -> Result<(S, LossBreakdown), ModelError> {
    batch_loss(model, &model.w_l(), std::slice::from_ref(window), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Tape, Var};
    use crate::flmodel::brunovsky_zoh;
    use crate::plants::SampledTrajectory;

    fn window_pair(errors: &[f64], n: usize) -> (SampledTrajectory, Vec<Vec<f64>>) {
        let m = errors.len() / n;
        let traj = SampledTrajectory {
            period: 0.01,
            t0: 0.0,
            n,
            inputs: vec![0.0; m + 1],
            states: vec![0.0; (m + 1) * n],
        };
        let pred = errors.chunks(n).map(|c| c.to_vec()).collect();
        (traj, pred)
    }

    #[test]
    fn l1_examples() {
        let (traj, pred) = window_pair(&[1.0, 1.0], 2);
        let w = Window::of(&traj, 0, 1).unwrap();
        assert_eq!(loss_l1(&w, &pred, &[1.0, 1.0]), 2.0);
        let (traj, pred) = window_pair(&[1.0, 0.0, 0.0, 0.0], 4);
        let w = Window::of(&traj, 0, 1).unwrap();
        assert_eq!(loss_l1(&w, &pred, &[4.0, 1.0, 4.0, 1.0]), 4.0);
        let (traj, pred) = window_pair(&[0.0; 4], 2);
        assert_eq!(loss_l1(&Window::of(&traj, 0, 2).unwrap(), &pred, &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn l2_brunovsky_determinant() {
        let (a, b) = brunovsky_zoh(2, 1e-3);
        let a = Matrix::new(2, 2, a).unwrap();
        let (l2, det) = loss_l2(&a, &b, 1e-4).unwrap();
        assert!((det + 1e-9).abs() < 1e-21, "det {det}");
        assert!((l2 - 1e9).abs() < 1e-3);
        let (l2, _) = loss_l2(&a, &[0.0, 0.0], 1e-4).unwrap();
        assert!(l2.is_infinite());
    }

    #[test]
    fn l3_examples() {
        let e = 10.0;
        assert_eq!(loss_l3(&[1.0, -3.0, 9.9], e), e);
        assert_eq!(loss_l3(&[2.0 * e], e), 2.0 * e);
        assert_eq!(loss_l3(&[e / 2.0, 3.0 * e], e), 2.0 * e);
    }

    #[test]
    fn l4_and_wl_examples() {
        let a = Matrix::diag(&[0.9954, 0.9881]);
        assert!((loss_l4(&a).unwrap() - (1.0 - 0.9954 * 0.9881)).abs() < 1e-15);
        assert!((loss_l4(&Matrix::diag(&[0.9951, 0.75])).unwrap() - 0.253675).abs() < 1e-12);
        assert_eq!(loss_l4(&Matrix::identity(3)).unwrap(), 0.0);
        let eps = 1e-4;
        assert_eq!(loss_wl(&Matrix::identity(2), eps).unwrap().0, 1.0 / eps);
        assert_eq!(loss_wl(&Matrix::diag(&[eps / 2.0, 1.0]), eps).unwrap().0, 2.0 / eps);
        assert!(loss_wl(&Matrix::zeros(2, 2), eps).unwrap().0.is_infinite());
    }

    #[test]
    fn floors_have_exactly_zero_gradient() {
        let tape = Tape::new();
        let p = tape.vars(&[1.0, 0.1, 0.0, 1.0, 0.005, 0.1]);
        let a = Matrix::new(2, 2, p[..4].to_vec()).unwrap();
        let (l2, _) = loss_l2(&a, &p[4..], 1e-4).unwrap();
        let g = tape.gradient(l2).unwrap().collect(&p);
        assert!(g.iter().all(|v| v.to_bits() == 0));
        let v: Vec<Var> = p.iter().map(|&x| x * 3.0).collect();
        let l3 = loss_l3(&v, 10.0);
        let g = tape.gradient(l3).unwrap().collect(&p);
        assert!(g.iter().all(|v| v.to_bits() == 0));
    }
}
