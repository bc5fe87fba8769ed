use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::ModelError;
use crate::plants::PlantSpec;

/// How the input law `u = α(x) + β(x)v` is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputLaw {
    /// Separate α and β nets, `v = (u − α(x)) / β(x)`.
    #[default]
    AlphaBeta,
    /// γ and β nets, `v = u / β(x) + γ(x)`, i.e. `α = −γβ`.
    GammaBeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Hidden widths shared by every feedforward net.
    pub hidden: Vec<usize>,
    pub coupling_blocks: usize,
    pub input_law: InputLaw,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            coupling_blocks: 1,
            input_law: InputLaw::AlphaBeta,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(ModelError::Config("hidden widths must be ≥ 1".into()));
        }
        if self.coupling_blocks == 0 {
            return Err(ModelError::Config("at least one coupling block is required".into()));
        }
        Ok(())
    }
}

/// Position of one dense layer inside the flat parameter vector. The
/// weight is `outputs × inputs`, row-major, followed by the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseSlot {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

/// Feedforward net `inputs → hidden… → 1`, SiLU between layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSlot {
    pub layers: Vec<DenseSlot>,
}

impl NetSlot {
    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn range(&self) -> Range<usize> {
        let first = self.layers.first().expect("net has layers");
        let last = self.layers.last().expect("net has layers");
        first.weight..last.bias + last.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingSlot {
    /// `s_i`, `t_i` for `i = 1..n`.
    pub scale: Vec<NetSlot>,
    pub shift: Vec<NetSlot>,
}

/// A named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    /// α for [`InputLaw::AlphaBeta`], γ for [`InputLaw::GammaBeta`].
    pub offset_net: NetSlot,
    pub beta: NetSlot,
    pub blocks: Vec<CouplingSlot>,
    pub w_l: usize,
    pub b_l: usize,
    pub a: usize,
    pub b: usize,
    pub total: usize,
    pub tensors: Vec<TensorSlot>,
}

struct Builder {
    next: usize,
    tensors: Vec<TensorSlot>,
}

impl Builder {
    fn take(&mut self, name: String, shape: Vec<usize>) -> usize {
        let len = shape.iter().product();
        let offset = self.next;
        self.tensors.push(TensorSlot { name, shape, offset, len });
        self.next += len;
        offset
    }

    fn net(&mut self, name: &str, inputs: usize, hidden: &[usize]) -> NetSlot {
        let mut sizes = vec![inputs];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let weight = self.take(format!("{name}.l{l}.weight"), vec![w[1], w[0]]);
                let bias = self.take(format!("{name}.l{l}.bias"), vec![w[1]]);
                DenseSlot { inputs: w[0], outputs: w[1], weight, bias }
            })
            .collect();
        NetSlot { layers }
    }
}

impl Layout {
    pub fn new(n: usize, arch: &Architecture) -> Self {
        let mut b = Builder { next: 0, tensors: Vec::new() };
        let offset_name = match arch.input_law {
            InputLaw::AlphaBeta => "alpha",
            InputLaw::GammaBeta => "gamma",
        };
        let offset_net = b.net(offset_name, n, &arch.hidden);
        let beta = b.net("beta", n, &arch.hidden);
        let blocks = (0..arch.coupling_blocks)
            .map(|k| {
                let mut scale = Vec::new();
                let mut shift = Vec::new();
                for i in 1..=n {
                    scale.push(b.net(&format!("phi.block{k}.s{i}"), n - 1, &arch.hidden));
                    shift.push(b.net(&format!("phi.block{k}.t{i}"), n - 1, &arch.hidden));
                }
                CouplingSlot { scale, shift }
            })
            .collect();
        let w_l = b.take("phi.w_l".into(), vec![n, n]);
        let b_l = b.take("phi.b_l".into(), vec![n]);
        let a = b.take("a".into(), vec![n, n]);
        let bb = b.take("b".into(), vec![n]);
        Self {
            n,
            offset_net,
            beta,
            blocks,
            w_l,
            b_l,
            a,
            b: bb,
            total: b.next,
            tensors: b.tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSlot> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Everything describing a model except the parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub plant: PlantSpec,
    pub n: usize,
    pub period: f64,
    pub seed: u64,
    pub architecture: Architecture,
    pub loss: LossConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub meta: ModelMeta,
    pub layout: Layout,
    pub values: Vec<f64>,
}

/// `(A, B)` of the zero-order-hold discretization of the continuous
/// integrator chain: `A_ik = T^{k−i}/(k−i)!` for `k ≥ i`,
/// `B_i = T^{n−i+1}/(n−i+1)!` (1-based).
pub fn brunovsky_zoh(n: usize, period: f64) -> (Vec<f64>, Vec<f64>) {
    let term = |p: usize| period.powi(p as i32) / (1..=p).map(|k| k as f64).product::<f64>();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for k in i..n {
            a[i * n + k] = term(k - i);
        }
    }
    let b = (0..n).map(|i| term(n - i)).collect();
    (a, b)
}

/// Fresh parameters: net weights and biases `U(±1/√fan_in)`, the last
/// layer of every coupling net zeroed (so φ starts as the identity),
/// `W_l = I`, `b_l = 0` and the Brunovsky pair for `(A, B)`.
pub fn init_params(meta: ModelMeta) -> Result<ModelParameters, ModelError> {
    meta.architecture.validate()?;
    meta.loss.validate(meta.n)?;
    if meta.plant.dim() != meta.n {
        return Err(ModelError::Dimension { expected: meta.plant.dim(), found: meta.n });
    }
    if !(meta.period > 0.0) {
        return Err(ModelError::Config("period must be positive".into()));
    }
    let layout = Layout::new(meta.n, &meta.architecture);
    let mut values = vec![0.0; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut fill = |net: &NetSlot, zero_last: bool, values: &mut [f64]| {
        let last = net.layers.len() - 1;
        for (l, d) in net.layers.iter().enumerate() {
            let bound = 1.0 / (d.inputs.max(1) as f64).sqrt();
            let count = d.inputs * d.outputs + d.outputs;
            for v in &mut values[d.weight..d.weight + count] {
                *v = rng.random_range(-bound..bound);
                if zero_last && l == last {
                    *v = 0.0;
                }
            }
        }
    };
    fill(&layout.offset_net, false, &mut values);
    fill(&layout.beta, false, &mut values);
    for block in &layout.blocks {
        for (s, t) in block.scale.iter().zip(&block.shift) {
            fill(s, true, &mut values);
            fill(t, true, &mut values);
        }
    }
    let n = meta.n;
    for i in 0..n {
        values[layout.w_l + i * n + i] = 1.0;
    }
    let (a, b) = brunovsky_zoh(n, meta.period);
    values[layout.a..layout.a + n * n].copy_from_slice(&a);
    values[layout.b..layout.b + n].copy_from_slice(&b);
    Ok(ModelParameters { meta, layout, values })
}

impl ModelParameters {
    pub fn n(&self) -> usize {
        self.meta.n
    }

    pub fn a_matrix(&self) -> Vec<f64> {
        self.values[self.layout.a..self.layout.a + self.n() * self.n()].to_vec()
    }

    pub fn b_vector(&self) -> Vec<f64> {
        self.values[self.layout.b..self.layout.b + self.n()].to_vec()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.tensor(name).map(|t| &self.values[t.offset..t.offset + t.len])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let t = self.layout.tensor(name)?.clone();
        Some(&mut self.values[t.offset..t.offset + t.len])
    }

    /// Parameter indices of the net producing α (or γ).
    pub fn offset_net_range(&self) -> Range<usize> {
        self.layout.offset_net.range()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::PlantId;

    fn meta(n: usize, seed: u64) -> ModelMeta {
        let plant = match n {
            2 => PlantSpec::reference(PlantId::C1),
            _ => PlantSpec::Chain { n },
        };
        ModelMeta {
            plant,
            n,
            period: 1e-3,
            seed,
            architecture: Architecture::default(),
            loss: LossConfig::default(),
        }
    }

    #[test]
    fn zoh_pair_for_two_states() {
        let (a, b) = brunovsky_zoh(2, 1e-3);
        assert_eq!(a, vec![1.0, 1e-3, 0.0, 1.0]);
        assert!((b[0] - 5e-7).abs() < 1e-22 && b[1] == 1e-3);
    }

    #[test]
    fn zoh_pair_matches_series_for_four_states() {
        let t: f64 = 0.1;
        let (a, b) = brunovsky_zoh(4, t);
        assert!((a[3] - t.powi(3) / 6.0).abs() < 1e-18);
        assert!((b[0] - t.powi(4) / 24.0).abs() < 1e-18);
        assert_eq!(a[4], 0.0);
    }

    #[test]
    fn layout_covers_every_value_once() {
        for n in 1..=4 {
            let layout = Layout::new(n, &Architecture::default());
            let mut seen = vec![false; layout.total];
            for t in &layout.tensors {
                for s in &mut seen[t.offset..t.offset + t.len] {
                    assert!(!*s);
                    *s = true;
                }
            }
            assert!(seen.into_iter().all(|s| s));
        }
    }

    #[test]
    fn init_is_reproducible_and_seeded() {
        let a = init_params(meta(2, 7)).unwrap();
        let b = init_params(meta(2, 7)).unwrap();
        let c = init_params(meta(2, 8)).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        assert_eq!(a.tensor("phi.w_l").unwrap(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(a.tensor("phi.block0.s1.l2.weight").unwrap().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 32f64.sqrt();
        assert!(a.tensor("alpha.l1.weight").unwrap().iter().all(|v| v.abs() < bound));
    }
}
