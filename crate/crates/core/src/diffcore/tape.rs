//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly while operations are appended to the tape.
//! [`Tape::gradient`] replays the tape backwards numerically, while
//! [`Tape::grad_recorded`] records the adjoint computation onto the same tape
//! so that the result can be differentiated again (used for nested Lie
//! derivatives).
//!
//! Non-smooth primitives (`abs`, `max`, `min`, the sign-gated clamp) use a
//! fixed subgradient: at a tie the derivative follows the first argument and
//! `abs`/clamp treat zero as positive. In a flat region the derivative is
//! exactly zero.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::DiffError;

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Const,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    AddConst(u32),
    MulConst(u32, f64),
    Exp(u32),
    Tanh(u32),
    Sin(u32),
    Cos(u32),
    Abs(u32),
    Silu(u32),
    Sign,
    Max(u32, u32),
    Min(u32, u32),
    MaxConst(u32, f64),
    MinConst(u32, f64),
    ClampAway(u32, f64),
    // bias + sum(w_i * x_i); operands laid out as [bias, w_0, x_0, w_1, x_1, ...]
    Affine { start: u32, len: u32 },
}

/// Append-only record of primitive operations.
///
/// A tape has a single writer. Create one tape per thread when evaluating in
/// parallel.
#[derive(Default)]
pub struct Tape {
    ops: RefCell<Vec<Op>>,
    values: RefCell<Vec<f64>>,
    operands: RefCell<Vec<u32>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value())
    }
}

/// Adjoints produced by a backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> f64 {
        self.adj.get(var.idx as usize).copied().unwrap_or(0.0)
    }

    pub fn collect(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.get(*v)).collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            ops: RefCell::new(Vec::with_capacity(nodes)),
            values: RefCell::new(Vec::with_capacity(nodes)),
            operands: RefCell::new(Vec::with_capacity(nodes * 4)),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New differentiable leaf.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        let mut ops = self.ops.borrow_mut();
        let mut vals = self.values.borrow_mut();
        let start = ops.len() as u32;
        ops.extend(std::iter::repeat_n(Op::Leaf, values.len()));
        vals.extend_from_slice(values);
        (0..values.len() as u32)
            .map(|i| Var {
                tape: self,
                idx: start + i,
            })
            .collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(Op::Const, value)
    }

    fn push(&self, op: Op, value: f64) -> Var<'_> {
        let mut ops = self.ops.borrow_mut();
        let idx = ops.len() as u32;
        ops.push(op);
        self.values.borrow_mut().push(value);
        Var { tape: self, idx }
    }

    fn value_of(&self, idx: u32) -> f64 {
        self.values.borrow()[idx as usize]
    }

    fn handle(&self, idx: u32) -> Var<'_> {
        Var { tape: self, idx }
    }

    /// Weighted sum `bias + Σ w_i x_i` recorded as a single node.
    pub fn affine<'t>(&'t self, bias: Var<'t>, w: &[Var<'t>], x: &[Var<'t>]) -> Var<'t> {
        assert_eq!(w.len(), x.len(), "affine operand length mismatch");
        let values = self.values.borrow();
        let mut acc = values[bias.idx as usize];
        for (wi, xi) in w.iter().zip(x) {
            acc += values[wi.idx as usize] * values[xi.idx as usize];
        }
        drop(values);
        let mut operands = self.operands.borrow_mut();
        let start = operands.len() as u32;
        operands.push(bias.idx);
        for (wi, xi) in w.iter().zip(x) {
            operands.push(wi.idx);
            operands.push(xi.idx);
        }
        drop(operands);
        self.push(
            Op::Affine {
                start,
                len: w.len() as u32,
            },
            acc,
        )
    }

    /// Numeric reverse pass from `output`.
    ///
    /// Fails with the offending node index if any value or adjoint on the
    /// path is non-finite.
    pub fn gradient(&self, output: Var<'_>) -> Result<Gradients, DiffError> {
        let ops = self.ops.borrow();
        let values = self.values.borrow();
        let operands = self.operands.borrow();
        let out = output.idx as usize;
        if !values[out].is_finite() {
            return Err(DiffError::NonFinite { node: out });
        }
        let mut adj = vec![0.0_f64; out + 1];
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            if !g.is_finite() || !values[i].is_finite() {
                return Err(DiffError::NonFinite { node: i });
            }
            let y = values[i];
            match ops[i] {
                Op::Leaf | Op::Const | Op::Sign => {}
                Op::Add(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] += g;
                }
                Op::Sub(a, b) => {
                    adj[a as usize] += g;
                    adj[b as usize] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a as usize] += g * values[b as usize];
                    adj[b as usize] += g * values[a as usize];
                }
                Op::Div(a, b) => {
                    let vb = values[b as usize];
                    adj[a as usize] += g / vb;
                    adj[b as usize] -= g * y / vb;
                }
                Op::Neg(a) => adj[a as usize] -= g,
                Op::AddConst(a) => adj[a as usize] += g,
                Op::MulConst(a, c) => adj[a as usize] += g * c,
                Op::Exp(a) => adj[a as usize] += g * y,
                Op::Tanh(a) => adj[a as usize] += g * (1.0 - y * y),
                Op::Sin(a) => adj[a as usize] += g * values[a as usize].cos(),
                Op::Cos(a) => adj[a as usize] -= g * values[a as usize].sin(),
                Op::Abs(a) => adj[a as usize] += g * positive_sign(values[a as usize]),
                Op::Silu(a) => adj[a as usize] += g * silu_derivative(values[a as usize]),
                Op::Max(a, b) => {
                    if values[a as usize] >= values[b as usize] {
                        adj[a as usize] += g;
                    } else {
                        adj[b as usize] += g;
                    }
                }
                Op::Min(a, b) => {
                    if values[a as usize] <= values[b as usize] {
                        adj[a as usize] += g;
                    } else {
                        adj[b as usize] += g;
                    }
                }
                Op::MaxConst(a, c) => {
                    if values[a as usize] >= c {
                        adj[a as usize] += g;
                    }
                }
                Op::MinConst(a, c) => {
                    if values[a as usize] <= c {
                        adj[a as usize] += g;
                    }
                }
                Op::ClampAway(a, eps) => {
                    if values[a as usize].abs() >= eps {
                        adj[a as usize] += g;
                    }
                }
                Op::Affine { start, len } => {
                    let s = start as usize;
                    adj[operands[s] as usize] += g;
                    for k in 0..len as usize {
                        let w = operands[s + 1 + 2 * k] as usize;
                        let x = operands[s + 2 + 2 * k] as usize;
                        adj[w] += g * values[x];
                        adj[x] += g * values[w];
                    }
                }
            }
        }
        Ok(Gradients { adj })
    }

    /// Records the adjoint of `output` with respect to `wrt` as new nodes,
    /// so the returned gradient is itself differentiable.
    pub fn grad_recorded<'t>(&'t self, output: Var<'t>, wrt: &[Var<'t>]) -> Vec<Var<'t>> {
        let out = output.idx as usize;
        let mut adj: Vec<Option<Var<'t>>> = vec![None; out + 1];
        adj[out] = Some(self.constant(1.0));
        let accumulate = |adj: &mut Vec<Option<Var<'t>>>, idx: u32, term: Var<'t>| {
            let slot = &mut adj[idx as usize];
            *slot = Some(match *slot {
                Some(prev) => prev + term,
                None => term,
            });
        };
        for i in (0..=out).rev() {
            let Some(g) = adj[i] else { continue };
            let op = self.ops.borrow()[i];
            let y = self.handle(i as u32);
            match op {
                Op::Leaf | Op::Const | Op::Sign => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, a, g);
                    accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, a, g);
                    accumulate(&mut adj, b, -g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut adj, a, g * self.handle(b));
                    accumulate(&mut adj, b, g * self.handle(a));
                }
                Op::Div(a, b) => {
                    let vb = self.handle(b);
                    accumulate(&mut adj, a, g / vb);
                    accumulate(&mut adj, b, -(g * y / vb));
                }
                Op::Neg(a) => accumulate(&mut adj, a, -g),
                Op::AddConst(a) => accumulate(&mut adj, a, g),
                Op::MulConst(a, c) => accumulate(&mut adj, a, g * c),
                Op::Exp(a) => accumulate(&mut adj, a, g * y),
                Op::Tanh(a) => accumulate(&mut adj, a, g * (1.0 - y * y)),
                Op::Sin(a) => accumulate(&mut adj, a, g * self.handle(a).cos()),
                Op::Cos(a) => accumulate(&mut adj, a, -(g * self.handle(a).sin())),
                Op::Abs(a) => {
                    let s = positive_sign(self.value_of(a));
                    accumulate(&mut adj, a, g * s);
                }
                Op::Silu(a) => {
                    let x = self.handle(a);
                    let sig = 1.0 / (1.0 + (-x).exp());
                    let d = sig * (1.0 + x * (1.0 - sig));
                    accumulate(&mut adj, a, g * d);
                }
                Op::Max(a, b) => {
                    let target = if self.value_of(a) >= self.value_of(b) { a } else { b };
                    accumulate(&mut adj, target, g);
                }
                Op::Min(a, b) => {
                    let target = if self.value_of(a) <= self.value_of(b) { a } else { b };
                    accumulate(&mut adj, target, g);
                }
                Op::MaxConst(a, c) => {
                    if self.value_of(a) >= c {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::MinConst(a, c) => {
                    if self.value_of(a) <= c {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::ClampAway(a, eps) => {
                    if self.value_of(a).abs() >= eps {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Affine { start, len } => {
                    let pairs: Vec<(u32, u32)> = {
                        let operands = self.operands.borrow();
                        let s = start as usize;
                        accumulate(&mut adj, operands[s], g);
                        (0..len as usize)
                            .map(|k| (operands[s + 1 + 2 * k], operands[s + 2 + 2 * k]))
                            .collect()
                    };
                    for (w, x) in pairs {
                        accumulate(&mut adj, w, g * self.handle(x));
                        accumulate(&mut adj, x, g * self.handle(w));
                    }
                }
            }
        }
        wrt.iter()
            .map(|v| {
                adj.get(v.idx as usize)
                    .copied()
                    .flatten()
                    .unwrap_or_else(|| self.constant(0.0))
            })
            .collect()
    }
}

#[inline]
fn positive_sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `sgn(a) * max(|a|, eps)` with `sgn(0) = +1`.
#[inline]
pub(crate) fn clamp_away(x: f64, eps: f64) -> f64 {
    if x >= 0.0 {
        x.max(eps)
    } else {
        x.min(-eps)
    }
}

/// Sign with `sgn(0) = 0`.
#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.tape.value_of(self.idx)
    }

    pub fn index(&self) -> usize {
        self.idx as usize
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, op: Op, value: f64) -> Var<'t> {
        self.tape.push(op, value)
    }

    fn binary(self, other: Var<'t>, op: Op, value: f64) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        self.tape.push(op, value)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.idx), self.value().exp())
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.idx), self.value().tanh())
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.idx), self.value().sin())
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.idx), self.value().cos())
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.idx), self.value().abs())
    }

    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu(self.idx), silu(self.value()))
    }

    /// Sign with zero derivative and `sgn(0) = 0`.
    pub fn sign(self) -> Var<'t> {
        self.unary(Op::Sign, sign(self.value()))
    }

    pub fn max(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        self.binary(other, Op::Max(self.idx, other.idx), if a >= b { a } else { b })
    }

    pub fn min(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        self.binary(other, Op::Min(self.idx, other.idx), if a <= b { a } else { b })
    }

    pub fn max_c(self, c: f64) -> Var<'t> {
        let a = self.value();
        self.unary(Op::MaxConst(self.idx, c), if a >= c { a } else { c })
    }

    pub fn min_c(self, c: f64) -> Var<'t> {
        let a = self.value();
        self.unary(Op::MinConst(self.idx, c), if a <= c { a } else { c })
    }

    /// `sgn(a) * max(|a|, eps)` with `sgn(0) = +1`.
    pub fn clamp_away(self, eps: f64) -> Var<'t> {
        self.unary(Op::ClampAway(self.idx, eps), clamp_away(self.value(), eps))
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value() + rhs.value();
        self.binary(rhs, Op::Add(self.idx, rhs.idx), v)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value() - rhs.value();
        self.binary(rhs, Op::Sub(self.idx, rhs.idx), v)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value() * rhs.value();
        self.binary(rhs, Op::Mul(self.idx, rhs.idx), v)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.value() / rhs.value();
        self.binary(rhs, Op::Div(self.idx, rhs.idx), v)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.idx), -self.value())
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.idx), self.value() + rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(Op::AddConst(self.idx), self.value() - rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(Op::MulConst(self.idx, rhs), self.value() * rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        let c = 1.0 / rhs;
        self.unary(Op::MulConst(self.idx, c), self.value() / rhs)
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        (-rhs) + self
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

impl<'t> Div<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        rhs.tape.constant(self) / rhs
    }
}
