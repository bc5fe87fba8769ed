//! Ground-truth simulators for the benchmark plants.
//!
//! Every plant is control-affine, `ẋ = f(x) + g(x) u`, and its vector fields
//! are written against [`Scalar`] so the same code runs on plain floats and on
//! a differentiation tape.

mod integrate;
mod simulate;

pub use integrate::{
    integrate_adaptive, integrate_plant_adaptive, rk4_step, AdaptiveOptions, AdaptiveStats,
};
pub(crate) use simulate::fmt17;
pub use simulate::{simulate_sampled, simulate_with_truth, NoiseSpec, SampledTrajectory, SimOptions};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::diffcore::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("state dimension mismatch: plant has n = {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("simulation diverged at t = {t}: x = {x:?}")]
    Divergence { t: f64, x: Vec<f64> },
    #[error("step size underflow at t = {t} (h = {h:e}); problem may be stiff")]
    StepUnderflow { t: f64, h: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("unknown plant id {0:?}")]
    UnknownPlant(String),
    #[error("right-hand side failed: {0}")]
    Rhs(String),
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PlantId {
    C1,
    C2,
    C3,
    /// Continuous chain of integrators `ẋ_i = x_{i+1}`, `ẋ_n = u`. Its ZOH
    /// samples are exactly a discrete Brunovsky pair.
    Chain,
}

impl fmt::Display for PlantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PlantId::C1 => "C1",
            PlantId::C2 => "C2",
            PlantId::C3 => "C3",
            PlantId::Chain => "Chain",
        };
        f.write_str(s)
    }
}

impl FromStr for PlantId {
    type Err = PlantError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "C1" => Ok(PlantId::C1),
            "C2" => Ok(PlantId::C2),
            "C3" => Ok(PlantId::C3),
            "CHAIN" => Ok(PlantId::Chain),
            _ => Err(PlantError::UnknownPlant(s.to_string())),
        }
    }
}

/// Parameters of the two synthetic plants.
///
/// `include_extra_term` toggles the term an uncertain nominal model leaves
/// out (`δ₂x₁` for C1, `δ₃ sin x₁ cos x₂` for C2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    #[serde(default = "yes")]
    pub include_extra_term: bool,
}

fn yes() -> bool {
    true
}

/// Single-link arm with a flexible joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlexibleJointParams {
    /// Link mass [kg].
    pub mass: f64,
    /// [m/s²]
    pub gravity: f64,
    /// Joint-to-center-of-mass distance [m].
    pub length: f64,
    /// Link inertia I [kg·m²].
    pub link_inertia: f64,
    /// Actuator inertia J [kg·m²].
    pub actuator_inertia: f64,
    /// f_v [N·m·s]
    pub viscous: f64,
    /// f_c [N·m]
    pub coulomb: f64,
    /// f_s [N·m]
    pub static_friction: f64,
    /// ω_s [1/s]
    pub stribeck_velocity: f64,
    /// Spring coefficients k₁, k₂, k₃ [N·m].
    pub spring: [f64; 3],
    #[serde(default = "yes")]
    pub include_friction: bool,
    /// Multiply the Stribeck term by sgn(x₄). Off by default: the term is
    /// used exactly as written, which leaves +(f_s − f_v) of friction at rest.
    #[serde(default)]
    pub stribeck_signed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", deny_unknown_fields)]
pub enum PlantSpec {
    C1(SyntheticParams),
    C2(SyntheticParams),
    C3(FlexibleJointParams),
    Chain { n: usize },
}

impl PlantSpec {
    /// Parameter values used in the reference experiments.
    pub fn reference(id: PlantId) -> Self {
        match id {
            PlantId::C1 => PlantSpec::C1(SyntheticParams {
                delta1: -0.25,
                delta2: -0.01,
                delta3: -0.25,
                include_extra_term: true,
            }),
            PlantId::C2 => PlantSpec::C2(SyntheticParams {
                delta1: 0.25,
                delta2: 0.25,
                delta3: 0.25,
                include_extra_term: true,
            }),
            PlantId::C3 => PlantSpec::C3(FlexibleJointParams {
                mass: 1.0,
                gravity: 9.8,
                length: 1.0,
                link_inertia: 1.0,
                actuator_inertia: 0.2,
                viscous: 0.2,
                coulomb: 0.7,
                static_friction: 0.9,
                stribeck_velocity: 0.06,
                spring: [5.0, 2.0, 1.0],
                include_friction: true,
                stribeck_signed: false,
            }),
            PlantId::Chain => PlantSpec::Chain { n: 2 },
        }
    }

    pub fn id(&self) -> PlantId {
        match self {
            PlantSpec::C1(_) => PlantId::C1,
            PlantSpec::C2(_) => PlantId::C2,
            PlantSpec::C3(_) => PlantId::C3,
            PlantSpec::Chain { .. } => PlantId::Chain,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            PlantSpec::C1(_) => 2,
            PlantSpec::C2(_) => 3,
            PlantSpec::C3(_) => 4,
            PlantSpec::Chain { n } => *n,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let finite = |vals: &[f64]| vals.iter().all(|v| v.is_finite());
        match self {
            PlantSpec::C1(p) => {
                if !finite(&[p.delta1, p.delta2, p.delta3]) {
                    return Err(PlantError::InvalidParams("non-finite δ".into()));
                }
            }
            PlantSpec::C2(p) => {
                if !finite(&[p.delta1, p.delta2, p.delta3]) {
                    return Err(PlantError::InvalidParams("non-finite δ".into()));
                }
                if p.delta1 * p.delta2 == 0.0 {
                    return Err(PlantError::InvalidParams(
                        "C2 needs δ₁·δ₂ ≠ 0 for full relative degree".into(),
                    ));
                }
            }
            PlantSpec::C3(p) => {
                let all = [
                    p.mass,
                    p.gravity,
                    p.length,
                    p.link_inertia,
                    p.actuator_inertia,
                    p.viscous,
                    p.coulomb,
                    p.static_friction,
                    p.stribeck_velocity,
                    p.spring[0],
                    p.spring[1],
                    p.spring[2],
                ];
                if !finite(&all) {
                    return Err(PlantError::InvalidParams("non-finite parameter".into()));
                }
                if p.link_inertia <= 0.0 || p.actuator_inertia <= 0.0 {
                    return Err(PlantError::InvalidParams("inertias must be positive".into()));
                }
                if p.stribeck_velocity == 0.0 {
                    return Err(PlantError::InvalidParams("ω_s must be non-zero".into()));
                }
            }
            PlantSpec::Chain { n } => {
                if *n < 1 {
                    return Err(PlantError::InvalidParams("chain needs n ≥ 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Drift vector field f(x).
    pub fn drift<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        match self {
            PlantSpec::C1(p) => {
                let mut f1 = x[1] + x[0] * x[0] * x[0] * p.delta1;
                if p.include_extra_term {
                    f1 = f1 + x[0] * p.delta2;
                }
                let f2 = x[0] * x[1].sin() * p.delta3;
                vec![f1, f2]
            }
            PlantSpec::C2(p) => {
                let f1 = x[1] * p.delta1 + x[0].sin();
                let mut f2 = x[2] * p.delta2;
                if p.include_extra_term {
                    f2 = f2 + x[0].sin() * x[1].cos() * p.delta3;
                }
                let f3 = -(x[0] * x[1] * x[2].cos());
                vec![f1, f2, f3]
            }
            PlantSpec::C3(p) => {
                let spring = spring_torque(p, x[0] - x[2]);
                let gravity = x[0].sin() * (p.mass * p.gravity * p.length / p.link_inertia);
                let f2 = -gravity - spring / p.link_inertia;
                let mut f4 = spring / p.actuator_inertia;
                if p.include_friction {
                    f4 = f4 - friction_torque(p, x[3]) / p.actuator_inertia;
                }
                vec![x[1], f2, x[3], f4]
            }
            PlantSpec::Chain { n } => {
                let mut f: Vec<S> = x[1..].to_vec();
                f.push(x[0].lift(0.0));
                debug_assert_eq!(f.len(), *n);
                f
            }
        }
    }

    /// Input vector field g(x).
    pub fn input_gain<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let n = self.dim();
        let last = match self {
            PlantSpec::C3(p) => 1.0 / p.actuator_inertia,
            _ => 1.0,
        };
        (0..n)
            .map(|i| x[0].lift(if i == n - 1 { last } else { 0.0 }))
            .collect()
    }

    /// `f(x) + g(x) u` without dimension checks.
    pub fn rhs_unchecked<S: Scalar>(&self, x: &[S], u: S) -> Vec<S> {
        let f = self.drift(x);
        let g = self.input_gain(x);
        f.into_iter().zip(g).map(|(fi, gi)| fi + gi * u).collect()
    }

    pub fn rhs(&self, x: &[f64], u: f64) -> Result<Vec<f64>, PlantError> {
        self.check_dim(x.len())?;
        Ok(self.rhs_unchecked(x, u))
    }

    pub(crate) fn check_dim(&self, found: usize) -> Result<(), PlantError> {
        if found != self.dim() {
            return Err(PlantError::Dimension {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }
}

/// `Σ kᵢ sgn(d)^{i−1} dⁱ = k₁d + k₂|d|d + k₃d³`.
pub fn spring_torque<S: Scalar>(p: &FlexibleJointParams, d: S) -> S {
    d * p.spring[0] + d.abs() * d * p.spring[1] + d * d * d * p.spring[2]
}

/// Viscous + Coulomb + Stribeck joint friction.
pub fn friction_torque<S: Scalar>(p: &FlexibleJointParams, velocity: S) -> S {
    let ratio = velocity / p.stribeck_velocity;
    let mut stribeck = (-(ratio * ratio)).exp() * (p.static_friction - p.viscous);
    if p.stribeck_signed {
        stribeck = stribeck * velocity.sign();
    }
    velocity * p.viscous + velocity.sign() * p.coulomb + stribeck
}
