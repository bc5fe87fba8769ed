use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::ExciteError;

/// Random piecewise sum-of-sines excitation.
///
/// Every `resegment_interval` seconds the amplitudes, frequencies and phases
/// are redrawn. The result is smoothed by a first-order low-pass filter
/// whose state is carried across segment boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalSpec {
    pub num_sines: usize,
    pub amplitude_mean: f64,
    pub amplitude_std: f64,
    /// Frequency range in rad/s.
    pub frequency_range: (f64, f64),
    pub phase_range: (f64, f64),
    pub resegment_interval: f64,
    /// τ_f in seconds, 0 disables filtering.
    pub lowpass_time_constant: f64,
    /// Scale applied to the filtered signal (1 reproduces the reference data).
    pub gain: f64,
    /// When true the signal is identically zero (zero-input data sets).
    pub zero: bool,
    pub seed: u64,
}

impl Default for SignalSpec {
    fn default() -> Self {
        Self {
            num_sines: 3,
            amplitude_mean: 1.0,
            amplitude_std: 1.0,
            frequency_range: (0.5, 1.5),
            phase_range: (-PI, PI),
            resegment_interval: 0.5,
            lowpass_time_constant: 0.05,
            gain: 1.0,
            zero: false,
            seed: 0,
        }
    }
}

impl SignalSpec {
    pub fn zero_input() -> Self {
        Self {
            zero: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExciteError> {
        let bad = |msg: &str| Err(ExciteError::InvalidSpec(msg.to_string()));
        if self.num_sines < 1 {
            return bad("num_sines must be ≥ 1");
        }
        if !(self.resegment_interval > 0.0) || !self.resegment_interval.is_finite() {
            return bad("resegment_interval must be > 0");
        }
        if !(self.lowpass_time_constant >= 0.0) || !self.lowpass_time_constant.is_finite() {
            return bad("lowpass_time_constant must be ≥ 0");
        }
        if !(self.amplitude_std >= 0.0) || !self.amplitude_mean.is_finite() {
            return bad("amplitude distribution must have finite mean and std ≥ 0");
        }
        let (lo, hi) = self.frequency_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad("frequency_range must be an ordered finite pair");
        }
        let (lo, hi) = self.phase_range;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return bad("phase_range must be an ordered finite pair");
        }
        if !self.gain.is_finite() {
            return bad("gain must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Sine {
    amplitude: f64,
    frequency: f64,
    phase: f64,
}

/// One realization of a [`SignalSpec`].
#[derive(Debug, Clone)]
pub struct ExcitationSignal {
    spec: SignalSpec,
    segments: Vec<Vec<Sine>>,
    rng: ChaCha8Rng,
}

impl ExcitationSignal {
    /// Realization number `stream` of the spec's seed.
    pub fn new(spec: &SignalSpec, stream: u64) -> Result<Self, ExciteError> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        Self::from_rng(spec, &mut rng)
    }

    /// Realization whose segment parameters are drawn from `rng`.
    pub fn from_rng<R: RngCore>(spec: &SignalSpec, rng: &mut R) -> Result<Self, ExciteError> {
        spec.validate()?;
        Ok(Self {
            spec: spec.clone(),
            segments: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
        })
    }

    pub fn spec(&self) -> &SignalSpec {
        &self.spec
    }

    fn segment(&mut self, index: usize) -> &[Sine] {
        let amplitude = Normal::new(self.spec.amplitude_mean, self.spec.amplitude_std).expect("validated");
        let frequency = Uniform::new_inclusive(self.spec.frequency_range.0, self.spec.frequency_range.1)
            .expect("validated");
        let (plo, phi) = self.spec.phase_range;
        while self.segments.len() <= index {
            let sines = (0..self.spec.num_sines)
                .map(|_| Sine {
                    amplitude: amplitude.sample(&mut self.rng),
                    frequency: frequency.sample(&mut self.rng),
                    phase: if plo < phi { self.rng.random_range(plo..phi) } else { plo },
                })
                .collect();
            self.segments.push(sines);
        }
        &self.segments[index]
    }

    /// Unfiltered piecewise sum of sines at time `t ≥ 0`.
    pub fn raw(&mut self, t: f64) -> f64 {
        if self.spec.zero {
            return 0.0;
        }
        let index = (t.max(0.0) / self.spec.resegment_interval).floor() as usize;
        let gain = self.spec.gain;
        self.segment(index)
            .iter()
            .map(|s| s.amplitude * (s.frequency * t + s.phase).sin())
            .sum::<f64>()
            * gain
    }

    /// `len` filtered samples at `t_k = k·period`, filtered with
    /// `y_k = y_{k−1} + (T/τ_f)(r_k − y_{k−1})` starting from `y_0 = r_0`.
    /// The gain `T/τ_f` is capped at 1.
    pub fn sample(&mut self, period: f64, len: usize) -> Vec<f64> {
        assert!(period > 0.0, "period must be positive");
        let tau = self.spec.lowpass_time_constant;
        let gain = if tau > 0.0 { (period / tau).min(1.0) } else { 1.0 };
        let mut out = Vec::with_capacity(len);
        let mut y = 0.0;
        for k in 0..len {
            let r = self.raw(k as f64 * period);
            y = if k == 0 { r } else { y + gain * (r - y) };
            out.push(y);
        }
        out
    }
}

/// Input value at time `t` of realization `stream`, with the low-pass
/// filter discretized at `period`. Filtered values are defined on the sample
/// grid; `t` is rounded down to it.
pub fn eval_input(spec: &SignalSpec, stream: u64, period: f64, t: f64) -> Result<f64, ExciteError> {
    if !(t >= 0.0) {
        return Err(ExciteError::InvalidSpec(format!("t = {t} must be ≥ 0")));
    }
    let mut signal = ExcitationSignal::new(spec, stream)?;
    if spec.lowpass_time_constant == 0.0 {
        return Ok(signal.raw(t));
    }
    let k = (t / period + 1e-9).floor() as usize;
    Ok(*signal.sample(period, k + 1).last().expect("non-empty"))
}
