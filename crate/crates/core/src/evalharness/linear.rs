use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::diffcore::Matrix;
use crate::flmodel::controllability_matrix;

/// A complex number in reports and configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pole {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl Pole {
    pub fn real(re: f64) -> Self {
        Self { re, im: 0.0 }
    }
}

impl From<Complex64> for Pole {
    fn from(c: Complex64) -> Self {
        Self { re: c.re, im: c.im }
    }
}

impl From<Pole> for Complex64 {
    fn from(p: Pole) -> Self {
        Complex64::new(p.re, p.im)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearReport {
    pub eigenvalues: Vec<Pole>,
    pub spectral_radius: f64,
    pub det_gamma: f64,
    pub abs_det_gamma: f64,
    pub det_a: f64,
    pub abs_det_a: f64,
    /// `||det A| − 1|`.
    pub det_a_deviation: f64,
    /// `|det Γ| ≥ ε₂`.
    pub controllable: bool,
}

/// Eigenvalues, controllability determinant and `det A` of a linear pair.
pub fn linear_report(a: &Matrix, b: &[f64], eps2: f64) -> Result<LinearReport, EvalError> {
    check_pair(a, b)?;
    let eig = eigenvalues(a)?;
    let det_gamma = controllability_matrix(a, b).det()?;
    let det_a = a.det()?;
    Ok(LinearReport {
        spectral_radius: eig.iter().map(|c| c.norm()).fold(0.0, f64::max),
        eigenvalues: eig.into_iter().map(Pole::from).collect(),
        det_gamma,
        abs_det_gamma: det_gamma.abs(),
        det_a,
        abs_det_a: det_a.abs(),
        det_a_deviation: (det_a.abs() - 1.0).abs(),
        controllable: det_gamma.abs() >= eps2,
    })
}

fn check_pair(a: &Matrix, b: &[f64]) -> Result<(), EvalError> {
    if !a.is_square() || a.rows() != b.len() || b.is_empty() {
        return Err(EvalError::Config(format!(
            "pair shapes {}x{} and {} do not match",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    Ok(())
}

/// Coefficients `c₀ … c_{n−1}, 1` of `det(λI − A)` (Faddeev–LeVerrier).
pub fn characteristic_polynomial(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    let mut m = Matrix::zeros(n, n);
    for k in 1..=n {
        let mut next = a.matmul(&m);
        for i in 0..n {
            next.set(i, i, next.get(i, i) + c[n - k + 1]);
        }
        m = next;
        let am = a.matmul(&m);
        let trace: f64 = (0..n).map(|i| am.get(i, i)).sum();
        c[n - k] = -trace / k as f64;
    }
    c
}

fn is_triangular(a: &Matrix) -> bool {
    let n = a.rows();
    let lower_zero = (0..n).all(|i| (0..i).all(|j| a.get(i, j) == 0.0));
    let upper_zero = (0..n).all(|i| (i + 1..n).all(|j| a.get(i, j) == 0.0));
    lower_zero || upper_zero
}

/// Eigenvalues of a square matrix: the diagonal when triangular, closed
/// form for 2×2, otherwise roots of the characteristic polynomial.
/// Sorted by decreasing real part, then decreasing imaginary part.
pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex64>, EvalError> {
    if !a.is_square() {
        return Err(EvalError::Config("eigenvalues need a square matrix".into()));
    }
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Config("matrix has non-finite entries".into()));
    }
    let n = a.rows();
    let mut eig = if is_triangular(a) {
        (0..n).map(|i| Complex64::new(a.get(i, i), 0.0)).collect()
    } else if n == 2 {
        let half_tr = 0.5 * (a.get(0, 0) + a.get(1, 1));
        let det = a.get(0, 0) * a.get(1, 1) - a.get(0, 1) * a.get(1, 0);
        let disc = half_tr * half_tr - det;
        if disc >= 0.0 {
            let r = disc.sqrt();
            // avoid cancellation in the smaller root
            let big = half_tr + r.copysign(half_tr);
            let small = if big != 0.0 { det / big } else { half_tr - r };
            vec![Complex64::new(big, 0.0), Complex64::new(small, 0.0)]
        } else {
            let r = (-disc).sqrt();
            vec![Complex64::new(half_tr, r), Complex64::new(half_tr, -r)]
        }
    } else {
        polynomial_roots(&characteristic_polynomial(a))
    };
    sort_complex(&mut eig);
    Ok(eig)
}

fn sort_complex(v: &mut [Complex64]) {
    v.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
}

fn horner(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    let mut p = Complex64::new(0.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for &c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

/// Roots of the monic polynomial `Σ cᵢ λⁱ` by Durand–Kerner iteration
/// followed by Newton polishing.
pub fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let radius = 1.0 + coeffs[..n].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
    let seed = Complex64::new(0.4, 0.9);
    let mut z: Vec<Complex64> = (0..n).map(|i| seed.powu(i as u32) * (radius / 2.0)).collect();
    for _ in 0..1000 {
        let mut change = 0.0_f64;
        for i in 0..n {
            let (p, _) = horner(coeffs, z[i]);
            let denom = (0..n).filter(|&j| j != i).fold(Complex64::new(1.0, 0.0), |acc, j| acc * (z[i] - z[j]));
            if denom.norm() == 0.0 {
                continue;
            }
            let step = p / denom;
            z[i] -= step;
            change = change.max(step.norm());
        }
        if change <= 1e-15 * radius {
            break;
        }
    }
    for root in z.iter_mut() {
        for _ in 0..3 {
            let (p, dp) = horner(coeffs, *root);
            if dp.norm() == 0.0 {
                break;
            }
            let next = *root - p / dp;
            if !next.re.is_finite() || !next.im.is_finite() {
                break;
            }
            *root = next;
        }
        if root.im.abs() <= 1e-12 * (1.0 + root.re.abs()) {
            root.im = 0.0;
        }
    }
    z
}

/// Real coefficients `c₀ … c_{n−1}, 1` of `Π (λ − pᵢ)`.
pub fn polynomial_from_roots(poles: &[Complex64]) -> Result<Vec<f64>, EvalError> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &p in poles {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i + 1] += ci;
            next[i] -= ci * p;
        }
        c = next;
    }
    let scale = 1.0 + poles.iter().map(|p| p.norm()).fold(0.0, f64::max).powi(poles.len() as i32);
    if c.iter().any(|ci| ci.im.abs() > 1e-9 * scale) {
        return Err(EvalError::InvalidPoles("pole set is not closed under conjugation".into()));
    }
    Ok(c.into_iter().map(|ci| ci.re).collect())
}

/// `Σ cᵢ Mⁱ` by Horner's scheme.
pub fn matrix_polynomial(coeffs: &[f64], m: &Matrix) -> Matrix {
    let n = m.rows();
    let mut acc = Matrix::zeros(n, n);
    for &c in coeffs.iter().rev() {
        acc = acc.matmul(m).add(&Matrix::identity(n).scale(c));
    }
    acc
}

/// Row gain `K` with `eig(A + B K)` equal to `poles` (Ackermann's formula,
/// `K = −e_nᵀ Γ⁻¹ χ(A)`).
pub fn pole_place(a: &Matrix, b: &[f64], poles: &[Complex64]) -> Result<Vec<f64>, EvalError> {
    check_pair(a, b)?;
    let n = b.len();
    if poles.len() != n {
        return Err(EvalError::InvalidPoles(format!("need {n} poles, got {}", poles.len())));
    }
    let chi = polynomial_from_roots(poles)?;
    let gamma = controllability_matrix(a, b);
    let det = gamma.det()?;
    if det.abs() <= 1e-12 {
        return Err(EvalError::Uncontrollable { det_gamma: det });
    }
    // e_nᵀ Γ⁻¹ is the solution q of Γᵀ q = e_n.
    let mut e_n = vec![0.0; n];
    e_n[n - 1] = 1.0;
    let q = gamma.transpose().solve(&e_n)?;
    let chi_a = matrix_polynomial(&chi, a);
    Ok((0..n).map(|j| -(0..n).map(|i| q[i] * chi_a.get(i, j)).sum::<f64>()).collect())
}

/// `A + B K`.
pub fn closed_loop_matrix(a: &Matrix, b: &[f64], k: &[f64]) -> Matrix {
    let n = b.len();
    Matrix::from_fn(n, n, |i, j| a.get(i, j) + b[i] * k[j])
}
