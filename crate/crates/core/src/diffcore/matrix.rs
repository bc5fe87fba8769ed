use serde::{Deserialize, Serialize};

use super::{DiffError, Scalar};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<S = f64> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

/// Largest size accepted by [`Matrix::det`].
pub const MAX_DET_DIM: usize = 8;

/// Relative pivot threshold below which [`Matrix::solve`] reports singularity.
const PIVOT_TOLERANCE: f64 = 1e-14;

impl<S: Scalar> Matrix<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self, DiffError> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(DiffError::Dimension {
                expected: format!("{rows}x{cols} with {} entries", rows * cols),
                found: format!("{} entries", data.len()),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.value().is_finite()) {
            return Err(DiffError::NonFiniteEntry { index: pos });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: S) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    pub fn values(&self) -> Matrix<f64> {
        self.map(|v| v.value())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|i| {
                let row = self.row(i);
                let mut acc = row[0] * x[0];
                for k in 1..self.cols {
                    acc = acc + row[k] * x[k];
                }
                acc
            })
            .collect()
    }

    pub fn matmul(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        Matrix::from_fn(self.rows, other.cols, |i, j| {
            let mut acc = self.get(i, 0) * other.get(0, j);
            for k in 1..self.cols {
                acc = acc + self.get(i, k) * other.get(k, j);
            }
            acc
        })
    }

    pub fn add(&self, other: &Matrix<S>) -> Matrix<S> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix::from_fn(self.rows, self.cols, |i, j| self.get(i, j) + other.get(i, j))
    }

    pub fn scale(&self, c: f64) -> Matrix<S> {
        self.map(|v| v * c)
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<S>]) -> Self {
        let rows = columns[0].len();
        Self::from_fn(rows, columns.len(), |i, j| columns[j][i])
    }

    /// Determinant by cofactor expansion along the first row.
    ///
    /// Differentiable when `S` is a tape variable.
    pub fn det(&self) -> Result<S, DiffError> {
        if !self.is_square() {
            return Err(DiffError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if self.rows > MAX_DET_DIM {
            return Err(DiffError::Dimension {
                expected: format!("at most {MAX_DET_DIM}x{MAX_DET_DIM}"),
                found: format!("{}x{}", self.rows, self.cols),
            });
        }
        let idx: Vec<usize> = (0..self.rows).collect();
        Ok(self.cofactor_det(&idx, &idx))
    }

    fn cofactor_det(&self, rows: &[usize], cols: &[usize]) -> S {
        let n = rows.len();
        match n {
            1 => self.get(rows[0], cols[0]),
            2 => {
                self.get(rows[0], cols[0]) * self.get(rows[1], cols[1])
                    - self.get(rows[0], cols[1]) * self.get(rows[1], cols[0])
            }
            _ => {
                let sub_rows = &rows[1..];
                let mut acc: Option<S> = None;
                for (k, &c) in cols.iter().enumerate() {
                    let sub_cols: Vec<usize> =
                        cols.iter().copied().filter(|&cc| cc != c).collect();
                    let term = self.get(rows[0], c) * self.cofactor_det(sub_rows, &sub_cols);
                    acc = Some(match acc {
                        None => term,
                        Some(a) if k % 2 == 0 => a + term,
                        Some(a) => a - term,
                    });
                }
                acc.expect("non-empty matrix")
            }
        }
    }

    /// Solves `self · y = rhs` by Gaussian elimination with partial pivoting.
    ///
    /// Pivot selection uses the current values, so the result stays
    /// differentiable on a tape.
    pub fn solve(&self, rhs: &[S]) -> Result<Vec<S>, DiffError> {
        if !self.is_square() {
            return Err(DiffError::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        let n = self.rows;
        if rhs.len() != n {
            return Err(DiffError::Dimension {
                expected: format!("rhs of length {n}"),
                found: format!("length {}", rhs.len()),
            });
        }
        let scale = self
            .data
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.value().abs()));
        if scale == 0.0 {
            return Err(DiffError::Singular { pivot: 0.0 });
        }
        let mut a: Vec<Vec<S>> = (0..n).map(|i| self.row(i).to_vec()).collect();
        let mut b = rhs.to_vec();
        for col in 0..n {
            let pivot_row = (col..n)
                .max_by(|&p, &q| {
                    a[p][col]
                        .value()
                        .abs()
                        .total_cmp(&a[q][col].value().abs())
                })
                .expect("non-empty range");
            let pivot = a[pivot_row][col].value();
            if pivot.abs() <= PIVOT_TOLERANCE * scale {
                return Err(DiffError::Singular { pivot });
            }
            a.swap(col, pivot_row);
            b.swap(col, pivot_row);
            for r in col + 1..n {
                let factor = a[r][col] / a[col][col];
                for c in col + 1..n {
                    a[r][c] = a[r][c] - factor * a[col][c];
                }
                b[r] = b[r] - factor * b[col];
            }
        }
        let mut y = b.clone();
        for i in (0..n).rev() {
            let mut acc = b[i];
            for j in i + 1..n {
                acc = acc - a[i][j] * y[j];
            }
            y[i] = acc / a[i][i];
        }
        Ok(y)
    }
}

impl Matrix<f64> {
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| 0.0)
    }

    pub fn diag(values: &[f64]) -> Self {
        Self::from_fn(values.len(), values.len(), |i, j| if i == j { values[i] } else { 0.0 })
    }

    /// Inverse assembled column by column from [`Matrix::solve`].
    pub fn inverse(&self) -> Result<Self, DiffError> {
        let n = self.rows;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let e: Vec<f64> = (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect();
            cols.push(self.solve(&e)?);
        }
        Ok(Self::from_columns(&cols))
    }

    pub fn max_abs_diff(&self, other: &Matrix<f64>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Free-function form of [`Matrix::solve`].
pub fn solve_linear<S: Scalar>(m: &Matrix<S>, rhs: &[S]) -> Result<Vec<S>, DiffError> {
    m.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn det_examples() {
        assert_eq!(Matrix::identity(3).det().unwrap(), 1.0);
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.det().unwrap(), -2.0);
        let dup = Matrix::new(
            4,
            4,
            vec![
                1.0, 2.0, 3.0, 4.0, //
                0.5, -1.0, 2.0, 7.0, //
                1.0, 2.0, 3.0, 4.0, //
                3.0, 1.0, 0.0, -2.0,
            ],
        )
        .unwrap();
        assert_eq!(dup.det().unwrap(), 0.0);
    }

    #[test]
    fn det_rejects_non_square() {
        let m = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(m.det(), Err(DiffError::NotSquare { .. })));
    }

    #[test]
    fn new_rejects_non_finite_and_bad_shape() {
        assert!(Matrix::new(2, 2, vec![1.0, f64::NAN, 0.0, 1.0]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn det_gradient_is_cofactor_matrix() {
        // d det / d a_ij = cofactor C_ij
        let tape = Tape::new();
        let vals = [2.0, -1.0, 0.5, 1.0, 3.0, -2.0, 0.0, 1.5, 4.0];
        let vars = tape.vars(&vals);
        let m = Matrix::new(3, 3, vars.clone()).unwrap();
        let d = m.det().unwrap();
        let g = tape.gradient(d).unwrap();
        let mf = Matrix::new(3, 3, vals.to_vec()).unwrap();
        let inv_t = mf.inverse().unwrap().transpose();
        let det = mf.det().unwrap();
        for k in 0..9 {
            let (i, j) = (k / 3, k % 3);
            assert!((g.get(vars[k]) - det * inv_t.get(i, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_examples() {
        let y = Matrix::identity(2).solve(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);
        let y = Matrix::diag(&[2.0, 4.0]).solve(&[2.0, 4.0]).unwrap();
        assert_eq!(y, vec![1.0, 1.0]);
    }

    #[test]
    fn solve_singular_is_error() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(m.solve(&[1.0, 1.0]), Err(DiffError::Singular { .. })));
    }

    #[test]
    fn solve_residual_on_random_well_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = Matrix::from_fn(4, 4, |i, j| {
                rng.random_range(-1.0..1.0) + if i == j { 4.0 } else { 0.0 }
            });
            let rhs: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
            let y = m.solve(&rhs).unwrap();
            let r = m.matvec(&y);
            let norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let res = r
                .iter()
                .zip(&rhs)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(res <= 1e-12 * norm, "residual {res}");
        }
    }

    #[test]
    fn inverse_reconstructs_identity_up_to_cond_1e6() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            // Rotation-like orthogonal factors around a diagonal spanning 1..1e-6.
            let q = {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let b: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r1 = Matrix::new(3, 3, vec![a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0]).unwrap();
                let r2 = Matrix::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, b.cos(), -b.sin(), 0.0, b.sin(), b.cos()]).unwrap();
                r1.matmul(&r2)
            };
            let m = q.matmul(&Matrix::diag(&[1.0, 1e-3, 1e-6])).matmul(&q.transpose());
            let inv = m.inverse().unwrap();
            let err = m.matmul(&inv).max_abs_diff(&Matrix::identity(3));
            assert!(err <= 1e-10, "identity deviation {err}");
            let det_prod = m.det().unwrap() * inv.det().unwrap();
            assert!((det_prod - 1.0).abs() < 1e-6);
        }
    }
}
