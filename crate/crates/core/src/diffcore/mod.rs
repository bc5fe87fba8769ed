//! Reverse-mode differentiation and the small dense linear algebra used by
//! the losses and the invertible network.

mod matrix;
mod scalar;
mod tape;

pub use matrix::{solve_linear, Matrix, MAX_DET_DIM};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("non-finite value at tape node {node}")]
    NonFinite { node: usize },
    #[error("non-finite matrix entry at flat index {index}")]
    NonFiniteEntry { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: String, found: String },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is singular to working tolerance (pivot {pivot:e})")]
    Singular { pivot: f64 },
}

/// Reverse-mode gradient of `objective` with respect to `params`.
pub fn gradient(objective: Var<'_>, params: &[Var<'_>]) -> Result<Vec<f64>, DiffError> {
    Ok(objective.tape().gradient(objective)?.collect(params))
}

/// Largest relative discrepancy `|g_ad - g_fd| / max(1, |g_fd|)` between the
/// reverse-mode gradient and central differences of step `h`.
pub fn check_gradient<F>(objective: F, at: &[f64], h: f64) -> Result<f64, DiffError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    let params = tape.vars(at);
    let out = objective(&params);
    let ad = gradient(out, &params)?;
    let eval = |point: &[f64]| {
        let tape = Tape::new();
        let p = tape.vars(point);
        objective(&p).value()
    };
    let mut worst = 0.0_f64;
    let mut point = at.to_vec();
    for (k, g_ad) in ad.iter().enumerate() {
        point[k] = at[k] + h;
        let up = eval(&point);
        point[k] = at[k] - h;
        let down = eval(&point);
        point[k] = at[k];
        let g_fd = (up - down) / (2.0 * h);
        worst = worst.max((g_ad - g_fd).abs() / g_fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // two-layer SiLU net with 3 inputs and 4 hidden units, all weights as params
    fn silu_net<'t>(p: &[Var<'t>]) -> Var<'t> {
        let x = [0.3, -1.2, 0.8].map(|v| p[0].lift(v));
        let mut hidden = Vec::new();
        for h in 0..4 {
            let w = &p[h * 4..h * 4 + 3];
            let b = p[h * 4 + 3];
            hidden.push(Scalar::affine(b, w, &x).silu());
        }
        let out = Scalar::affine(p[20], &p[16..20], &hidden);
        out * out
    }

    #[test]
    fn silu_net_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let at: Vec<f64> = (0..21).map(|_| rng.random_range(-1.0..1.0)).collect();
            let err = check_gradient(silu_net, &at, 1e-5).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn linear_objective_is_exact() {
        fn lin<'t>(p: &[Var<'t>]) -> Var<'t> {
            p[0] * 3.0 - p[1] * 0.5 + p[2]
        }
        for h in [1e-3, 1e-5, 0.1] {
            assert!(check_gradient(lin, &[1.0, 2.0, -4.0], h).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn flat_region_gives_zero_on_both_sides() {
        fn flat<'t>(p: &[Var<'t>]) -> Var<'t> {
            p[0].abs().max_c(5.0)
        }
        let tape = Tape::new();
        let p = tape.vars(&[0.4]);
        let g = gradient(flat(&p), &p).unwrap();
        assert_eq!(g, vec![0.0]);
        assert_eq!(check_gradient(flat, &[0.4], 1e-5).unwrap(), 0.0);
    }
}
