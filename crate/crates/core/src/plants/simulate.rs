use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::integrate::{diverged, rk4_step_with};
use super::{PlantError, PlantSpec};

/// Zero-mean Gaussian process and measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    #[serde(default)]
    pub process_variance: f64,
    #[serde(default)]
    pub measurement_variance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            process_variance: 0.0,
            measurement_variance: 0.0,
            seed: 0,
        }
    }

    pub fn measurement(variance: f64, seed: u64) -> Self {
        Self {
            measurement_variance: variance,
            seed,
            ..Self::none()
        }
    }

    pub fn process(variance: f64, seed: u64) -> Self {
        Self {
            process_variance: variance,
            seed,
            ..Self::none()
        }
    }

    pub fn is_silent(&self) -> bool {
        self.process_variance == 0.0 && self.measurement_variance == 0.0
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        for v in [self.process_variance, self.measurement_variance] {
            if !v.is_finite() || v < 0.0 {
                return Err(PlantError::InvalidParams(format!("noise variance {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }

    /// Independent generator for trajectory `index`.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimOptions {
    /// RK4 sub-steps per sampling period.
    pub substeps: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { substeps: 1 }
    }
}

/// Uniformly sampled `(t, u, x)` record, `t_k = t0 + k·T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub period: f64,
    pub t0: f64,
    pub n: usize,
    pub inputs: Vec<f64>,
    /// Row-major `len × n` states.
    pub states: Vec<f64>,
}

impl SampledTrajectory {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.period
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.n..(k + 1) * self.n]
    }

    /// Writes `t,u,x1..xn` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PlantError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string(), "u".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for k in 0..self.len() {
            let mut row = vec![fmt17(self.time(k)), fmt17(self.inputs[k])];
            row.extend(self.state(k).iter().map(|v| fmt17(*v)));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| PlantError::Csv(e.to_string()))
    }

    /// Reads the format of [`SampledTrajectory::write_csv`]; `period` is
    /// taken from the caller (the manifest) rather than re-derived from `t`.
    pub fn read_csv<R: Read>(reader: R, period: f64) -> Result<Self, PlantError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "t" || &header[1] != "u" {
            return Err(PlantError::Csv(format!("unexpected header {header:?}")));
        }
        let n = header.len() - 2;
        let mut inputs = Vec::new();
        let mut states = Vec::new();
        let mut t0 = None;
        for record in r.records() {
            let record = record.map_err(csv_err)?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| PlantError::Csv(format!("bad number {s:?}: {e}")))
            };
            if t0.is_none() {
                t0 = Some(parse(&record[0])?);
            }
            inputs.push(parse(&record[1])?);
            for i in 0..n {
                states.push(parse(&record[2 + i])?);
            }
        }
        Ok(Self {
            period,
            t0: t0.unwrap_or(0.0),
            n,
            inputs,
            states,
        })
    }
}

fn csv_err(e: csv::Error) -> PlantError {
    PlantError::Csv(e.to_string())
}

/// 17 significant digits, exact for every finite `f64`.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulates the plant under zero-order-hold `inputs` (one per sample) and
/// returns the recorded (possibly noisy) trajectory.
pub fn simulate_sampled(
    spec: &PlantSpec,
    x0: &[f64],
    inputs: &[f64],
    period: f64,
    noise: &NoiseSpec,
    stream: u64,
    opts: SimOptions,
) -> Result<SampledTrajectory, PlantError> {
    simulate_with_truth(spec, x0, inputs, period, noise, stream, opts).map(|(measured, _)| measured)
}

/// Like [`simulate_sampled`] but also returns the noise-free recording of
/// the true state.
///
/// Process noise is drawn once per period per state (variance
/// `process_variance`) and added to the state derivative over that period.
/// Measurement noise is added to every recorded sample.
pub fn simulate_with_truth(
    spec: &PlantSpec,
    x0: &[f64],
    inputs: &[f64],
    period: f64,
    noise: &NoiseSpec,
    stream: u64,
    opts: SimOptions,
) -> Result<(SampledTrajectory, SampledTrajectory), PlantError> {
    spec.check_dim(x0.len())?;
    noise.validate()?;
    assert!(period > 0.0 && opts.substeps >= 1);
    let n = spec.dim();
    let mut rng = noise.rng_for(stream);
    let process = Normal::new(0.0, noise.process_variance.sqrt()).expect("valid std");
    let measurement = Normal::new(0.0, noise.measurement_variance.sqrt()).expect("valid std");

    let mut truth = Vec::with_capacity(inputs.len() * n);
    let mut measured = Vec::with_capacity(inputs.len() * n);
    let mut x = x0.to_vec();
    let h = period / opts.substeps as f64;
    for (k, &u) in inputs.iter().enumerate() {
        truth.extend_from_slice(&x);
        if noise.measurement_variance > 0.0 {
            measured.extend(x.iter().map(|v| v + measurement.sample(&mut rng)));
        } else {
            measured.extend_from_slice(&x);
        }
        if k + 1 == inputs.len() {
            break;
        }
        let w: Option<Vec<f64>> = (noise.process_variance > 0.0)
            .then(|| (0..n).map(|_| process.sample(&mut rng)).collect());
        for _ in 0..opts.substeps {
            x = rk4_step_with(spec, &x, u, h, w.as_deref());
        }
        if diverged(&x) {
            return Err(PlantError::Divergence {
                t: (k + 1) as f64 * period,
                x,
            });
        }
    }
    let make = |states| SampledTrajectory {
        period,
        t0: 0.0,
        n,
        inputs: inputs.to_vec(),
        states,
    };
    Ok((make(measured), make(truth)))
}
