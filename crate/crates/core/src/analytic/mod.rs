//! Analytical input-state linearization of a known (or deliberately
//! mis-specified) plant model, built from Lie derivatives of the output
//! `h(x) = x₁`. Used as the reference predictor the learned model is
//! compared against.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{solve_linear, Matrix, Tape, Var};
use crate::plants::{integrate_adaptive, AdaptiveOptions, PlantError, PlantId, PlantSpec};

/// Smallest admissible `|L_g L_f^{n−1} h|`.
pub const SINGULARITY_TOL: f64 = 1e-9;
pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error("relative degree lost at x = {x:?}: L_g L_f^(n-1) h = {value:e}")]
    Singular { x: Vec<f64>, value: f64 },
    #[error("inverse transform did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite Lie derivative at x = {x:?}")]
    NonFinite { x: Vec<f64> },
    #[error("order {k} exceeds state dimension {n}")]
    Order { k: usize, n: usize },
    #[error("no documented perturbation for plant {0}")]
    NoPerturbation(PlantId),
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Parameter changes and dropped terms defining the uncertain nominal
/// model of each benchmark plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "plant", deny_unknown_fields)]
pub enum PerturbationSpec {
    /// Sets δ₁ and δ₃, drops `δ₂x₁`.
    C1 { delta1: f64, delta3: f64 },
    /// Sets δ₁ and δ₂, drops `δ₃ sin x₁ cos x₂`.
    C2 { delta1: f64, delta2: f64 },
    /// Drops the joint friction.
    C3,
}

impl PerturbationSpec {
    pub fn for_plant(id: PlantId) -> Result<Self, AnalyticError> {
        match id {
            PlantId::C1 => Ok(PerturbationSpec::C1 { delta1: -0.255, delta3: -0.255 }),
            PlantId::C2 => Ok(PerturbationSpec::C2 { delta1: 0.27, delta2: 0.27 }),
            PlantId::C3 => Ok(PerturbationSpec::C3),
            PlantId::Chain => Err(AnalyticError::NoPerturbation(id)),
        }
    }

    pub fn apply(&self, spec: &PlantSpec) -> Result<PlantSpec, AnalyticError> {
        let mut out = spec.clone();
        match (self, &mut out) {
            (PerturbationSpec::C1 { delta1, delta3 }, PlantSpec::C1(p)) => {
                p.delta1 = *delta1;
                p.delta3 = *delta3;
                p.include_extra_term = false;
            }
            (PerturbationSpec::C2 { delta1, delta2 }, PlantSpec::C2(p)) => {
                p.delta1 = *delta1;
                p.delta2 = *delta2;
                p.include_extra_term = false;
            }
            (PerturbationSpec::C3, PlantSpec::C3(p)) => p.include_friction = false,
            _ => return Err(AnalyticError::NoPerturbation(spec.id())),
        }
        out.validate()?;
        Ok(out)
    }
}

/// The vector fields `f`, `g` of a plant model with output `h(x) = x₁`.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalModel {
    pub spec: PlantSpec,
}

/// `L_f^k h` for `k = 0..=n` and `L_g L_f^k h` for `k = 0..n`, on a tape.
struct LieTower<'t> {
    lf: Vec<Var<'t>>,
    lg: Vec<Var<'t>>,
}

/// Input transform and coordinates of the analytic linearization at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticTransform {
    pub alpha: f64,
    pub beta: f64,
    pub z: Vec<f64>,
}

impl NominalModel {
    pub fn exact(spec: &PlantSpec) -> Result<Self, AnalyticError> {
        spec.validate()?;
        Ok(Self { spec: spec.clone() })
    }

    pub fn perturbed(spec: &PlantSpec, perturbation: &PerturbationSpec) -> Result<Self, AnalyticError> {
        Ok(Self { spec: perturbation.apply(spec)? })
    }

    /// The documented uncertain model of `spec`'s plant.
    pub fn documented_perturbation(spec: &PlantSpec) -> Result<Self, AnalyticError> {
        Self::perturbed(spec, &PerturbationSpec::for_plant(spec.id())?)
    }

    pub fn n(&self) -> usize {
        self.spec.dim()
    }

    fn tower<'t>(&self, tape: &'t Tape, x: &[Var<'t>], depth: usize) -> LieTower<'t> {
        let f = self.spec.drift(x);
        let g = self.spec.input_gain(x);
        let dot = |a: &[Var<'t>], b: &[Var<'t>]| {
            a.iter().zip(b).fold(tape.constant(0.0), |acc, (&p, &q)| acc + p * q)
        };
        let mut lf = vec![x[0]];
        let mut lg = Vec::with_capacity(depth);
        for k in 0..depth {
            let grad = tape.grad_recorded(lf[k], x);
            lg.push(dot(&grad, &g));
            lf.push(dot(&grad, &f));
        }
        LieTower { lf, lg }
    }

    fn check(&self, x: &[f64]) -> Result<(), AnalyticError> {
        self.spec.check_dim(x.len())?;
        Ok(())
    }

    /// `L_f^k h(x)`.
    pub fn lie_derivative(&self, x: &[f64], k: usize) -> Result<f64, AnalyticError> {
        self.check(x)?;
        if k > self.n() {
            return Err(AnalyticError::Order { k, n: self.n() });
        }
        let tape = Tape::new();
        let xs = tape.vars(x);
        finite(self.tower(&tape, &xs, k).lf[k].value(), x)
    }

    /// `L_g L_f^k h(x)`.
    pub fn mixed_lie_derivative(&self, x: &[f64], k: usize) -> Result<f64, AnalyticError> {
        self.check(x)?;
        if k >= self.n() {
            return Err(AnalyticError::Order { k, n: self.n() });
        }
        let tape = Tape::new();
        let xs = tape.vars(x);
        finite(self.tower(&tape, &xs, k + 1).lg[k].value(), x)
    }

    /// `L_g L_f^k h(x)` for every `k < n`.
    pub fn relative_degree_profile(&self, x: &[f64]) -> Result<Vec<f64>, AnalyticError> {
        self.check(x)?;
        let tape = Tape::new();
        let xs = tape.vars(x);
        self.tower(&tape, &xs, self.n()).lg.iter().map(|v| finite(v.value(), x)).collect()
    }

    /// `z = (h, L_f h, …, L_f^{n−1} h)`.
    pub fn phi(&self, x: &[f64]) -> Result<Vec<f64>, AnalyticError> {
        Ok(self.phi_with_jacobian(x)?.0)
    }

    fn phi_with_jacobian(&self, x: &[f64]) -> Result<(Vec<f64>, Matrix), AnalyticError> {
        self.check(x)?;
        let n = self.n();
        let tape = Tape::new();
        let xs = tape.vars(x);
        let tower = self.tower(&tape, &xs, n - 1);
        let z: Vec<f64> = tower.lf.iter().map(|v| v.value()).collect();
        let mut jac = Matrix::zeros(n, n);
        for (i, &zi) in tower.lf.iter().enumerate() {
            let row = tape
                .gradient(zi)
                .map_err(|_| AnalyticError::NonFinite { x: x.to_vec() })?
                .collect(&xs);
            for (j, v) in row.into_iter().enumerate() {
                jac.set(i, j, v);
            }
        }
        if z.iter().chain(jac.data()).any(|v| !v.is_finite()) {
            return Err(AnalyticError::NonFinite { x: x.to_vec() });
        }
        Ok((z, jac))
    }

    /// Linearizing input law and coordinates at `x`.
    pub fn analytic_transform(&self, x: &[f64]) -> Result<AnalyticTransform, AnalyticError> {
        self.check(x)?;
        let n = self.n();
        let tape = Tape::new();
        let xs = tape.vars(x);
        let tower = self.tower(&tape, &xs, n);
        let lgf = finite(tower.lg[n - 1].value(), x)?;
        let lfn = finite(tower.lf[n].value(), x)?;
        if lgf.abs() <= SINGULARITY_TOL {
            return Err(AnalyticError::Singular { x: x.to_vec(), value: lgf });
        }
        Ok(AnalyticTransform {
            alpha: -lfn / lgf,
            beta: 1.0 / lgf,
            z: tower.lf[..n].iter().map(|v| v.value()).collect(),
        })
    }

    /// Solves `φ(x) = z` by Newton's method from `x_guess`; returns the
    /// solution and the number of iterations taken.
    pub fn phi_inverse_newton(&self, z: &[f64], x_guess: &[f64]) -> Result<(Vec<f64>, usize), AnalyticError> {
        self.check(z)?;
        self.check(x_guess)?;
        if z.iter().chain(x_guess).any(|v| !v.is_finite()) {
            return Err(AnalyticError::NonFinite { x: x_guess.to_vec() });
        }
        let scale = z.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        let mut x = x_guess.to_vec();
        let mut residual = f64::INFINITY;
        for iter in 0..=NEWTON_MAX_ITER {
            let (phi, jac) = self.phi_with_jacobian(&x)?;
            let r: Vec<f64> = phi.iter().zip(z).map(|(p, t)| p - t).collect();
            residual = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if residual <= NEWTON_TOL * scale {
                return Ok((x, iter));
            }
            if iter == NEWTON_MAX_ITER {
                break;
            }
            let step = solve_linear(&jac, &r).map_err(|_| AnalyticError::NoConvergence {
                iterations: iter,
                residual,
            })?;
            for (xi, s) in x.iter_mut().zip(step) {
                *xi -= s;
            }
        }
        Err(AnalyticError::NoConvergence { iterations: NEWTON_MAX_ITER, residual })
    }
}

fn finite(v: f64, x: &[f64]) -> Result<f64, AnalyticError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(AnalyticError::NonFinite { x: x.to_vec() })
    }
}

/// Relative tolerance of the adaptive integrator used by [`analytic_rollout`].
pub const ROLLOUT_RTOL: f64 = 1e-8;

/// Simulates the linearized model `ż = A_b z + B_b v` (continuous Brunovsky
/// form) from `x0` with input `inputs[k]` held on `[kT, (k+1)T)`. At every
/// integrator stage the state is recovered by Newton inversion and
/// `v = (u − α_a(x))/β_a(x)`. Returns `x̂(t_1) … x̂(t_{len−1})`.
pub fn analytic_rollout(
    model: &NominalModel,
    x0: &[f64],
    inputs: &[f64],
    period: f64,
) -> Result<Vec<Vec<f64>>, AnalyticError> {
    model.check(x0)?;
    if inputs.len() < 2 {
        return Ok(Vec::new());
    }
    let n = model.n();
    let opts = AdaptiveOptions {
        rtol: ROLLOUT_RTOL,
        atol: 1e-12,
        max_step: period,
        ..AdaptiveOptions::default()
    };
    let mut x = x0.to_vec();
    let mut z = model.phi(x0)?;
    let mut out = Vec::with_capacity(inputs.len() - 1);
    for (k, &u) in inputs[..inputs.len() - 1].iter().enumerate() {
        let t0 = k as f64 * period;
        let mut warm = x.clone();
        let (states, _) = integrate_adaptive::<_, AnalyticError>(
            |_, zs| {
                let (xs, _) = model.phi_inverse_newton(zs, &warm)?;
                let tr = model.analytic_transform(&xs)?;
                warm = xs;
                let mut dz = zs[1..].to_vec();
                dz.push((u - tr.alpha) / tr.beta);
                debug_assert_eq!(dz.len(), n);
                Ok(dz)
            },
            t0,
            &z,
            &[t0 + period],
            &opts,
        )?;
        z = states.into_iter().next().expect("one output");
        x = model.phi_inverse_newton(&z, &x)?.0;
        out.push(x.clone());
    }
    Ok(out)
}
