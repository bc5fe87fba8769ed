//! Fixed-step RK4 and adaptive Dormand–Prince 5(4) integration.

use super::{PlantError, PlantSpec};

/// Divergence guard: states beyond this magnitude are treated as blown up.
const DIVERGENCE_LIMIT: f64 = 1e8;

/// One classical RK4 step of length `h` with the input held at `u`.
///
/// `extra` is a constant derivative offset (process noise held over the step).
pub(crate) fn rk4_step_with(
    spec: &PlantSpec,
    x: &[f64],
    u: f64,
    h: f64,
    extra: Option<&[f64]>,
) -> Vec<f64> {
    let f = |y: &[f64]| {
        let mut d = spec.rhs_unchecked(y, u);
        if let Some(w) = extra {
            for (di, wi) in d.iter_mut().zip(w) {
                *di += wi;
            }
        }
        d
    };
    let n = x.len();
    let k1 = f(x);
    let y2: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k1[i]).collect();
    let k2 = f(&y2);
    let y3: Vec<f64> = (0..n).map(|i| x[i] + 0.5 * h * k2[i]).collect();
    let k3 = f(&y3);
    let y4: Vec<f64> = (0..n).map(|i| x[i] + h * k3[i]).collect();
    let k4 = f(&y4);
    (0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

pub(crate) fn diverged(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

/// Classical fourth-order step with zero-order-hold input.
pub fn rk4_step(spec: &PlantSpec, x: &[f64], u_held: f64, period: f64) -> Result<Vec<f64>, PlantError> {
    spec.check_dim(x.len())?;
    assert!(period > 0.0, "step must be positive");
    let next = rk4_step_with(spec, x, u_held, period, None);
    if diverged(&next) {
        return Err(PlantError::Divergence { t: period, x: next });
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub first_step: Option<f64>,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            first_step: None,
            max_step: f64::INFINITY,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdaptiveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// error coefficients (5th minus embedded 4th order weights)
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// dense output
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Integrates `ẏ = f(t, y)` from `t0` to the last entry of `outputs` with
/// Dormand–Prince 5(4), PI step control and dense output, returning the
/// state at every requested time (which must be non-decreasing and ≥ `t0`).
pub fn integrate_adaptive<F, E>(
    mut f: F,
    t0: f64,
    y0: &[f64],
    outputs: &[f64],
    opts: &AdaptiveOptions,
) -> Result<(Vec<Vec<f64>>, AdaptiveStats), E>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
    E: From<PlantError>,
{
    assert!(opts.rtol > 0.0 && opts.atol > 0.0, "tolerances must be positive");
    let n = y0.len();
    let mut stats = AdaptiveStats::default();
    let mut result = Vec::with_capacity(outputs.len());
    let Some(&t_end) = outputs.last() else {
        return Ok((result, stats));
    };
    let mut next_out = 0;
    while next_out < outputs.len() && outputs[next_out] <= t0 {
        result.push(y0.to_vec());
        next_out += 1;
    }
    if next_out == outputs.len() {
        return Ok((result, stats));
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = f(t, &y)?;
    stats.evaluations += 1;
    let span = t_end - t0;
    let mut h = match opts.first_step {
        Some(h) => h,
        None => initial_step(&mut f, t, &y, &k1, opts, span, &mut stats)?,
    }
    .min(opts.max_step)
    .min(span);

    const SAFETY: f64 = 0.9;
    const BETA: f64 = 0.04;
    const EXPO1: f64 = 0.2 - BETA * 0.75;
    const FAC_MIN: f64 = 0.2; // largest shrink is 1/5
    const FAC_MAX: f64 = 10.0;
    let mut fac_old = 1e-4_f64;
    let mut last_rejected = false;

    let scratch = |y: &[f64], terms: &[(f64, &Vec<f64>)], h: f64| -> Vec<f64> {
        (0..n)
            .map(|i| y[i] + h * terms.iter().map(|(c, k)| c * k[i]).sum::<f64>())
            .collect()
    };

    while next_out < outputs.len() {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(PlantError::StepUnderflow { t, h }.into());
        }
        if h.abs() <= 1e-14 * t.abs().max(1.0) {
            return Err(PlantError::StepUnderflow { t, h }.into());
        }
        let last_step = t + h >= t_end;
        if last_step {
            h = t_end - t;
        }
        let k2 = f(t + C2 * h, &scratch(&y, &[(A21, &k1)], h))?;
        let k3 = f(t + C3 * h, &scratch(&y, &[(A31, &k1), (A32, &k2)], h))?;
        let k4 = f(t + C4 * h, &scratch(&y, &[(A41, &k1), (A42, &k2), (A43, &k3)], h))?;
        let k5 = f(
            t + C5 * h,
            &scratch(&y, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], h),
        )?;
        let k6 = f(
            t + h,
            &scratch(&y, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], h),
        )?;
        let y_new = scratch(
            &y,
            &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)],
            h,
        );
        let k7 = f(t + h, &y_new)?;
        stats.evaluations += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc) * (e / sc);
        }
        let err = (err / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            stats.rejected += 1;
            h *= FAC_MIN;
            last_rejected = true;
            continue;
        }

        let fac11 = err.powf(EXPO1);
        if err <= 1.0 {
            // dense output coefficients over [t, t + h]
            let t_new = if last_step { t_end } else { t + h };
            while next_out < outputs.len() && outputs[next_out] <= t_new {
                let theta = if h > 0.0 { (outputs[next_out] - t) / h } else { 1.0 };
                let theta1 = 1.0 - theta;
                let point = (0..n)
                    .map(|i| {
                        let r2 = y_new[i] - y[i];
                        let r3 = h * k1[i] - r2;
                        let r4 = r2 - h * k7[i] - r3;
                        let r5 = h
                            * (D1 * k1[i]
                                + D3 * k3[i]
                                + D4 * k4[i]
                                + D5 * k5[i]
                                + D6 * k6[i]
                                + D7 * k7[i]);
                        y[i] + theta * (r2 + theta1 * (r3 + theta * (r4 + theta1 * r5)))
                    })
                    .collect::<Vec<f64>>();
                result.push(if outputs[next_out] == t_new { y_new.clone() } else { point });
                next_out += 1;
            }
            stats.accepted += 1;
            let mut fac = fac11 / fac_old.powf(BETA) / SAFETY;
            fac = fac.clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            fac_old = err.max(1e-4);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            t = t_new;
            y = y_new;
            if diverged(&y) {
                return Err(PlantError::Divergence { t, x: y }.into());
            }
            k1 = k7;
            h = h_new.min(opts.max_step);
        } else {
            stats.rejected += 1;
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            last_rejected = true;
        }
    }
    Ok((result, stats))
}

fn initial_step<F, E>(
    f: &mut F,
    t: f64,
    y: &[f64],
    f0: &[f64],
    opts: &AdaptiveOptions,
    span: f64,
    stats: &mut AdaptiveStats,
) -> Result<f64, E>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
{
    let n = y.len().max(1) as f64;
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let norm = |v: &[f64]| (v.iter().zip(&sc).map(|(a, s)| (a / s).powi(2)).sum::<f64>() / n).sqrt();
    let d0 = norm(y);
    let d1 = norm(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let f1 = f(t + h0, &y1)?;
    stats.evaluations += 1;
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Adaptive integration of a plant under a continuous-time input signal.
pub fn integrate_plant_adaptive(
    spec: &PlantSpec,
    x0: &[f64],
    input: impl Fn(f64) -> f64,
    t0: f64,
    sample_times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Vec<Vec<f64>>, PlantError> {
    spec.check_dim(x0.len())?;
    let opts = AdaptiveOptions {
        rtol,
        atol,
        ..AdaptiveOptions::default()
    };
    let (out, _) = integrate_adaptive::<_, PlantError>(
        |t, y| Ok(spec.rhs_unchecked(y, input(t))),
        t0,
        x0,
        sample_times,
        &opts,
    )?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::PlantId;

    fn max_dev(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn equilibrium_is_fixed() {
        for id in [PlantId::C1, PlantId::C2] {
            let spec = PlantSpec::reference(id);
            let x = vec![0.0; spec.dim()];
            assert_eq!(rk4_step(&spec, &x, 0.0, 0.3).unwrap(), x);
            let out = integrate_plant_adaptive(&spec, &x, |_| 0.0, 0.0, &[0.5, 1.0], 1e-8, 1e-10).unwrap();
            assert_eq!(out[1], x);
        }
    }

    #[test]
    fn rk4_matches_adaptive_reference_at_1ms() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let x = [1.0, 0.0];
        let step = rk4_step(&c1, &x, 0.0, 1e-3).unwrap();
        let reference = integrate_plant_adaptive(&c1, &x, |_| 0.0, 0.0, &[1e-3], 1e-13, 1e-15).unwrap();
        assert!(max_dev(&step, &reference[0]) <= 1e-10);
    }

    #[test]
    fn rk4_fourth_order_self_convergence() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let x = [1.5, -0.5];
        let u = 0.7;
        let reference = integrate_plant_adaptive(&c1, &x, |_| u, 0.0, &[0.1], 1e-13, 1e-15).unwrap();
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&h: &f64| {
                let steps = (0.1 / h).round() as usize;
                let mut y = x.to_vec();
                for _ in 0..steps {
                    y = rk4_step(&c1, &y, u, h).unwrap();
                }
                max_dev(&y, &reference[0])
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((13.0..=20.0).contains(&ratio), "ratio {ratio} from {errs:?}");
        }
    }

    #[test]
    fn adaptive_matches_fine_rk4_over_two_seconds() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let x0 = [2.0, -1.0];
        let times: Vec<f64> = (1..=20).map(|k| k as f64 * 0.1).collect();
        let adaptive = integrate_plant_adaptive(&c1, &x0, |_| 0.0, 0.0, &times, 1e-9, 1e-12).unwrap();
        let mut y = x0.to_vec();
        let h = 1e-5;
        for (k, expected) in adaptive.iter().enumerate() {
            let target = (k + 1) * 10_000;
            let done = k * 10_000;
            for _ in done..target {
                y = rk4_step(&c1, &y, 0.0, h).unwrap();
            }
            assert!(max_dev(&y, expected) <= 1e-8, "t = {} dev {:e}", times[k], max_dev(&y, expected));
        }
    }

    #[test]
    fn tightening_tolerance_changes_endpoint_little() {
        let c2 = PlantSpec::reference(PlantId::C2);
        let x0 = [0.5, -1.0, 2.0];
        let loose = integrate_plant_adaptive(&c2, &x0, |t| t.sin(), 0.0, &[2.0], 1e-6, 1e-9).unwrap();
        let tight = integrate_plant_adaptive(&c2, &x0, |t| t.sin(), 0.0, &[2.0], 1e-9, 1e-12).unwrap();
        assert!(max_dev(&loose[0], &tight[0]) <= 1e-6);
    }

    #[test]
    fn dense_output_is_accurate_between_steps() {
        // ẏ = -y, exact solution e^{-t}
        let times: Vec<f64> = (0..=50).map(|k| k as f64 * 0.037).collect();
        let opts = AdaptiveOptions { rtol: 1e-10, atol: 1e-12, ..Default::default() };
        let (out, stats) = integrate_adaptive::<_, PlantError>(|_, y| Ok(vec![-y[0]]), 0.0, &[1.0], &times, &opts).unwrap();
        assert!(stats.accepted < times.len() * 3);
        for (t, y) in times.iter().zip(out) {
            assert!((y[0] - (-t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_reported() {
        let c1 = PlantSpec::reference(PlantId::C1);
        let err = rk4_step(&c1, &[1e5, 0.0], 0.0, 0.1).unwrap_err();
        assert!(matches!(err, PlantError::Divergence { .. }));
    }
}
