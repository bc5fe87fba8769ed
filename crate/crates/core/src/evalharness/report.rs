use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::plants::{fmt17, NoiseSpec, PlantId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Learned,
    AnalyticExact,
    AnalyticPerturbed,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Learned => "learned",
            Variant::AnalyticExact => "analytic-exact",
            Variant::AnalyticPerturbed => "analytic-perturbed",
        })
    }
}

/// Absolute prediction errors of one predictor over a set of trajectories,
/// with their per-step mean and standard deviation. Step `k` is time
/// `(k + 1)·T`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub variant: Variant,
    pub plant: PlantId,
    pub period: f64,
    pub n: usize,
    pub noise: NoiseSpec,
    /// `[trajectory][step][state]`
    pub errors: Vec<Vec<Vec<f64>>>,
    /// `[step][state]`
    pub mean: Vec<Vec<f64>>,
    /// Population standard deviation across trajectories, `[step][state]`.
    pub std: Vec<Vec<f64>>,
}

pub const REPORT_HEADER: &str = "t,state,mean_abs_err,std_abs_err,variant";

impl EvaluationReport {
    pub fn from_errors(
        variant: Variant,
        plant: PlantId,
        period: f64,
        n: usize,
        noise: NoiseSpec,
        errors: Vec<Vec<Vec<f64>>>,
    ) -> Self {
        let steps = errors.first().map_or(0, |e| e.len());
        let count = errors.len() as f64;
        let mut mean = vec![vec![0.0; n]; steps];
        let mut std = vec![vec![0.0; n]; steps];
        for k in 0..steps {
            for d in 0..n {
                let m = errors.iter().map(|e| e[k][d]).sum::<f64>() / count;
                let var = errors.iter().map(|e| (e[k][d] - m).powi(2)).sum::<f64>() / count;
                mean[k][d] = m;
                std[k][d] = var.sqrt();
            }
        }
        Self { variant, plant, period, n, noise, errors, mean, std }
    }

    pub fn n_traj(&self) -> usize {
        self.errors.len()
    }

    pub fn steps(&self) -> usize {
        self.mean.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        (k + 1) as f64 * self.period
    }

    /// Mean over states of the mean absolute error at step `k`.
    pub fn mean_error_at(&self, k: usize) -> f64 {
        self.mean[k].iter().sum::<f64>() / self.n as f64
    }

    /// [`Self::mean_error_at`] at the last step.
    pub fn final_mean_error(&self) -> Option<f64> {
        self.steps().checked_sub(1).map(|k| self.mean_error_at(k))
    }

    pub fn summary(&self) -> ReportSummary {
        let last = self.steps().checked_sub(1);
        ReportSummary {
            variant: self.variant,
            plant: self.plant,
            period: self.period,
            n_traj: self.n_traj(),
            steps: self.steps(),
            noise: self.noise,
            final_time: last.map(|k| self.time(k)),
            final_mean: last.map(|k| self.mean[k].clone()),
            final_std: last.map(|k| self.std[k].clone()),
            final_mean_error: self.final_mean_error(),
        }
    }
}

/// Report metadata and end-of-horizon errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub variant: Variant,
    pub plant: PlantId,
    pub period: f64,
    pub n_traj: usize,
    pub steps: usize,
    pub noise: NoiseSpec,
    pub final_time: Option<f64>,
    pub final_mean: Option<Vec<f64>>,
    pub final_std: Option<Vec<f64>>,
    pub final_mean_error: Option<f64>,
}

/// Writes `t,state,mean_abs_err,std_abs_err,variant` rows for every report;
/// states are numbered from 1.
pub fn write_report_csv<W: Write>(reports: &[EvaluationReport], mut w: W) -> Result<(), EvalError> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        for k in 0..r.steps() {
            let t = fmt17(r.time(k));
            for d in 0..r.n {
                writeln!(w, "{t},{},{},{},{}", d + 1, fmt17(r.mean[k][d]), fmt17(r.std[k][d]), r.variant)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn report(errors: Vec<Vec<Vec<f64>>>) -> EvaluationReport {
        let n = errors[0][0].len();
        EvaluationReport::from_errors(Variant::Learned, PlantId::C1, 0.1, n, NoiseSpec::none(), errors)
    }

    #[test]
    fn mean_and_std_by_hand() {
        let r = report(vec![vec![vec![1.0, 0.0]], vec![vec![3.0, 0.0]]]);
        assert_eq!(r.mean, vec![vec![2.0, 0.0]]);
        assert_eq!(r.std, vec![vec![1.0, 0.0]]);
        assert_eq!(r.final_mean_error(), Some(1.0));
    }

    #[test]
    fn empty_horizon_gives_empty_report() {
        let empty = EvaluationReport::from_errors(Variant::Learned, PlantId::C1, 0.1, 2, NoiseSpec::none(), vec![vec![]; 3]);
        assert_eq!(empty.steps(), 0);
        assert_eq!(empty.final_mean_error(), None);
        let mut buf = Vec::new();
        write_report_csv(&[empty], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{REPORT_HEADER}\n"));
    }

    #[test]
    fn csv_has_five_columns() {
        let r = report(vec![vec![vec![1.0, 2.0]; 3]; 4]);
        let mut buf = Vec::new();
        write_report_csv(&[r], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines.iter().all(|l| l.split(',').count() == 5));
        assert!(lines[1].ends_with(",learned"));
    }

    proptest! {
        #[test]
        fn aggregation_matches_recomputation(
            errs in prop::collection::vec(prop::collection::vec(0.0..5.0f64, 6), 1..20)
        ) {
            let errors: Vec<Vec<Vec<f64>>> = errs.iter().map(|e| e.chunks(2).map(|c| c.to_vec()).collect()).collect();
            let r = report(errors.clone());
            for k in 0..3 {
                for d in 0..2 {
                    let xs: Vec<f64> = errors.iter().map(|e| e[k][d]).collect();
                    let m = xs.iter().sum::<f64>() / xs.len() as f64;
                    let s = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt();
                    prop_assert!((r.mean[k][d] - m).abs() <= 1e-12);
                    prop_assert!((r.std[k][d] - s).abs() <= 1e-12);
                    prop_assert!(r.std[k][d] >= 0.0);
                }
            }
        }
    }
}
