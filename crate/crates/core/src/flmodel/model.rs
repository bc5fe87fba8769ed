use super::arch::{InputLaw, Layout, ModelParameters, NetSlot};
use super::ModelError;
use crate::diffcore::{Matrix, Scalar};

/// A feedback linearization `(φ, α, β, A, B)`: the input law
/// `u = α(x) + β(x)v` turns the plant into `z⁺ = A z + B v` in the
/// coordinates `z = φ(x)`.
pub trait Linearization<S: Scalar> {
    fn n(&self) -> usize;
    /// Constant in the scalar domain of the model.
    fn lift(&self, c: f64) -> S;
    fn alpha(&self, x: &[S]) -> S;
    /// Clamped β, never zero.
    fn beta(&self, x: &[S]) -> S;
    fn phi(&self, x: &[S]) -> Vec<S>;
    fn phi_inverse(&self, z: &[S]) -> Result<Vec<S>, ModelError>;
    fn a(&self) -> Matrix<S>;
    fn b(&self) -> Vec<S>;

    /// `v = (u − α(x)) / β(x)`.
    fn input_transform(&self, x: &[S], u: S) -> S {
        (u - self.alpha(x)) / self.beta(x)
    }

    /// `u = α(x) + β(x) v`.
    fn control(&self, x: &[S], v: S) -> S {
        self.alpha(x) + self.beta(x) * v
    }
}

/// Generic evaluation of a feedforward net stored in `p`.
pub fn mlp<S: Scalar>(p: &[S], net: &NetSlot, x: &[S]) -> S {
    let mut h: Vec<S> = x.to_vec();
    let last = net.layers.len() - 1;
    for (l, d) in net.layers.iter().enumerate() {
        let mut out = Vec::with_capacity(d.outputs);
        for o in 0..d.outputs {
            let w = &p[d.weight + o * d.inputs..d.weight + (o + 1) * d.inputs];
            let y = S::affine(p[d.bias + o], w, &h);
            out.push(if l == last { y } else { y.silu() });
        }
        h = out;
    }
    h[0]
}

/// The learned model evaluated over parameters `p` (plain floats or tape
/// variables).
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a, S> {
    pub layout: &'a Layout,
    pub law: InputLaw,
    pub eps1: f64,
    pub p: &'a [S],
}

impl<'a, S: Scalar> ModelView<'a, S> {
    pub fn new(layout: &'a Layout, law: InputLaw, eps1: f64, p: &'a [S]) -> Self {
        assert_eq!(p.len(), layout.total, "parameter vector does not match layout");
        Self { layout, law, eps1, p }
    }

    /// Unclamped β net output.
    pub fn beta_raw(&self, x: &[S]) -> S {
        mlp(self.p, &self.layout.beta, x)
    }

    /// α for the α-β law, γ for the γ-β law.
    pub fn offset_net(&self, x: &[S]) -> S {
        mlp(self.p, &self.layout.offset_net, x)
    }

    pub fn w_l(&self) -> Matrix<S> {
        let n = self.layout.n;
        Matrix::from_fn(n, n, |i, j| self.p[self.layout.w_l + i * n + j])
    }

    fn coupling_args(x: &[S], z: &[S], i: usize) -> Vec<S> {
        let mut args = Vec::with_capacity(x.len() - 1);
        args.extend_from_slice(&x[i + 1..]);
        args.extend_from_slice(&z[..i]);
        args
    }

    /// Coupling blocks only (before the affine output layer).
    pub fn couple(&self, x: &[S]) -> Vec<S> {
        let n = self.layout.n;
        let mut cur = x.to_vec();
        for block in &self.layout.blocks {
            let mut z = Vec::with_capacity(n);
            for i in 0..n {
                let args = Self::coupling_args(&cur, &z, i);
                let s = mlp(self.p, &block.scale[i], &args).tanh();
                let t = mlp(self.p, &block.shift[i], &args);
                z.push(cur[i] * s.exp() + t);
            }
            cur = z;
        }
        cur
    }

    /// Inverse of [`ModelView::couple`].
    pub fn uncouple(&self, z: &[S]) -> Vec<S> {
        let n = self.layout.n;
        let mut cur = z.to_vec();
        for block in self.layout.blocks.iter().rev() {
            let mut x = cur.clone();
            for i in (0..n).rev() {
                let args = Self::coupling_args(&x, &cur, i);
                let s = mlp(self.p, &block.scale[i], &args).tanh();
                let t = mlp(self.p, &block.shift[i], &args);
                x[i] = (cur[i] - t) * (-s).exp();
            }
            cur = x;
        }
        cur
    }
}

impl<'a, S: Scalar> Linearization<S> for ModelView<'a, S> {
    fn n(&self) -> usize {
        self.layout.n
    }

    fn lift(&self, c: f64) -> S {
        self.p[0].lift(c)
    }

    fn alpha(&self, x: &[S]) -> S {
        match self.law {
            InputLaw::AlphaBeta => self.offset_net(x),
            InputLaw::GammaBeta => -(self.offset_net(x) * self.beta(x)),
        }
    }

    fn beta(&self, x: &[S]) -> S {
        self.beta_raw(x).clamp_away(self.eps1)
    }

    fn input_transform(&self, x: &[S], u: S) -> S {
        match self.law {
            InputLaw::AlphaBeta => (u - self.offset_net(x)) / self.beta(x),
            InputLaw::GammaBeta => u / self.beta(x) + self.offset_net(x),
        }
    }

    fn phi(&self, x: &[S]) -> Vec<S> {
        let z = self.couple(x);
        let bias = &self.p[self.layout.b_l..self.layout.b_l + self.layout.n];
        self.w_l().matvec(&z).into_iter().zip(bias).map(|(v, &b)| v + b).collect()
    }

    fn phi_inverse(&self, z: &[S]) -> Result<Vec<S>, ModelError> {
        let bias = &self.p[self.layout.b_l..self.layout.b_l + self.layout.n];
        let shifted: Vec<S> = z.iter().zip(bias).map(|(&v, &b)| v - b).collect();
        let inner = self.w_l().solve(&shifted)?;
        Ok(self.uncouple(&inner))
    }

    fn a(&self) -> Matrix<S> {
        let n = self.layout.n;
        Matrix::from_fn(n, n, |i, j| self.p[self.layout.a + i * n + j])
    }

    fn b(&self) -> Vec<S> {
        self.p[self.layout.b..self.layout.b + self.layout.n].to_vec()
    }
}

impl ModelParameters {
    pub fn view(&self) -> ModelView<'_, f64> {
        ModelView::new(&self.layout, self.meta.architecture.input_law, self.meta.loss.eps1, &self.values)
    }

    /// View over externally held parameter values (e.g. tape variables).
    pub fn view_with<'a, S: Scalar>(&'a self, p: &'a [S]) -> ModelView<'a, S> {
        ModelView::new(&self.layout, self.meta.architecture.input_law, self.meta.loss.eps1, p)
    }
}

/// The equivalent linearization `(φ, α + Kφβ, μβ, A + BK, μB)`.
#[derive(Debug, Clone)]
pub struct GaugeTransformed<M> {
    pub inner: M,
    pub k: Vec<f64>,
    pub mu: f64,
}

impl<M> GaugeTransformed<M> {
    pub fn new(inner: M, k: Vec<f64>, mu: f64) -> Self {
        assert!(mu != 0.0, "gauge scale must be non-zero");
        Self { inner, k, mu }
    }
}

impl<S: Scalar, M: Linearization<S>> Linearization<S> for GaugeTransformed<M> {
    fn n(&self) -> usize {
        self.inner.n()
    }

    fn lift(&self, c: f64) -> S {
        self.inner.lift(c)
    }

    fn alpha(&self, x: &[S]) -> S {
        let z = self.inner.phi(x);
        let kz = z.iter().zip(&self.k).fold(self.lift(0.0), |acc, (&zi, &ki)| acc + zi * ki);
        self.inner.alpha(x) + kz * self.inner.beta(x)
    }

    fn beta(&self, x: &[S]) -> S {
        self.inner.beta(x) * self.mu
    }

    fn phi(&self, x: &[S]) -> Vec<S> {
        self.inner.phi(x)
    }

    fn phi_inverse(&self, z: &[S]) -> Result<Vec<S>, ModelError> {
        self.inner.phi_inverse(z)
    }

    fn a(&self) -> Matrix<S> {
        let a = self.inner.a();
        let b = self.inner.b();
        Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b[i] * self.k[j])
    }

    fn b(&self) -> Vec<S> {
        self.inner.b().into_iter().map(|v| v * self.mu).collect()
    }
}
