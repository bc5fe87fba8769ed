use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use flforge_core::analytic::NominalModel;
use flforge_core::evalharness::{
    closed_loop_sim, evaluate_analytic, evaluate_learned, fresh_trajectories, held_out_samples, linear_report,
    single_step_eval, write_report_csv, EvalError, EvaluationReport, Pole, ReportSummary, Variant,
};
use flforge_core::excite::{generate_dataset, Dataset, ExciteError, SignalSpec};
use flforge_core::flmodel::{init_params, Linearization, ModelParameters};
use flforge_core::plants::{NoiseSpec, PlantId, PlantSpec};
use flforge_core::trainer::{train_two_stage, train_with, TrainError, TrainLog, TrainOptions};

use crate::config::{NoiseMode, NoiseStudyConfig, RunConfig};
use crate::{Cli, CliError, Command, Common, EvalCommand, EvalCommon};

pub const SEED_ENV: &str = "FLFORGE_SEED";

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData { common, zero_input, trajectories } => gen_data(&common, zero_input, trajectories),
        Command::Train { common, data, resume, two_stage, zero_data, epochs } => {
            train(&common, data, resume, two_stage, zero_data, epochs)
        }
        Command::Eval { kind } => eval(kind),
    }
}

struct Run {
    cfg: RunConfig,
    plant: PlantSpec,
    out: PathBuf,
}

fn load_run(common: &Common, tweak: impl FnOnce(&mut RunConfig)) -> Result<Run, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    tweak(&mut cfg);
    let cfg = cfg.resolve()?;
    let plant = cfg.plant_spec()?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("resolved_config.json"), cfg.to_json())
        .map_err(|e| CliError::Config(format!("cannot write resolved config: {e}")))?;
    Ok(Run { cfg, plant, out })
}

fn write_json<T: Serialize>(path: &Path, value: &T, err: fn(String) -> CliError) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| err(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| err(format!("cannot write {}: {e}", path.display())))
}

fn data_error(e: ExciteError) -> CliError {
    match e {
        ExciteError::InvalidSpec(m) => CliError::Config(m),
        other => CliError::Simulation(other.to_string()),
    }
}

fn simulate(run: &Run, zero_input: bool) -> Result<Dataset, CliError> {
    let signal = if zero_input { SignalSpec::zero_input() } else { run.cfg.signal.clone() };
    generate_dataset(&run.plant, &signal, &run.cfg.dataset_spec(), &run.cfg.dataset.noise, run.cfg.seed)
        .map_err(data_error)
}

fn gen_data(common: &Common, zero_input: bool, trajectories: Option<usize>) -> Result<(), CliError> {
    let run = load_run(common, |c| {
        if let Some(n) = trajectories {
            c.dataset.n_traj = n;
        }
    })?;
    let data = simulate(&run, zero_input)?;
    let dir = run.out.join(if zero_input { "zero_data" } else { "data" });
    data.save(&dir).map_err(|e| CliError::Simulation(e.to_string()))?;
    println!("{} pairs", data.pair_count());
    if !data.manifest.diverged.is_empty() {
        eprintln!("{} trajectories diverged and were dropped", data.manifest.diverged.len());
    }
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(m) => CliError::Config(m),
        other => CliError::Training(other.to_string()),
    }
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    Dataset::load(dir).map_err(|e| CliError::Config(format!("cannot load data set {}: {e}", dir.display())))
}

fn write_log(path: &Path, log: &TrainLog) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| CliError::Training(e.to_string()))?;
    log.write_csv(BufWriter::new(file)).map_err(|e| CliError::Training(e.to_string()))
}

fn train(
    common: &Common,
    data: Option<PathBuf>,
    resume: Option<PathBuf>,
    two_stage: bool,
    zero_data: Option<PathBuf>,
    epochs: Option<usize>,
) -> Result<(), CliError> {
    let run = load_run(common, |c| {
        if let Some(e) = epochs {
            c.train.epochs = e;
        }
        if two_stage {
            c.train.two_stage = true;
        }
    })?;
    let cfg = &run.cfg;
    let dataset = load_data(&data.unwrap_or_else(|| run.out.join("data")))?;
    if dataset.manifest.plant.id() != run.plant.id() || dataset.dim() != run.plant.dim() {
        return Err(CliError::Config(format!(
            "data set plant {} does not match configured plant {}",
            dataset.manifest.plant.id(),
            run.plant.id()
        )));
    }
    let init = match resume {
        Some(path) => {
            let mut p = ModelParameters::load_expecting(&path, run.plant.dim())
                .map_err(|e| CliError::Config(format!("cannot resume from {}: {e}", path.display())))?;
            p.meta.loss = cfg.loss.clone().expect("resolved");
            p
        }
        None => init_params(cfg.model_meta()?).map_err(|e| CliError::Config(e.to_string()))?,
    };
    let ckpt = run.out.join("model.json");
    let log_path = run.out.join("train_log.csv");
    let outcome = if cfg.train.two_stage {
        let zero = match zero_data {
            Some(dir) => load_data(&dir)?,
            None => simulate(&run, true)?,
        };
        train_two_stage(&zero, &dataset, init, &cfg.train).map(|(first, second)| {
            (Some(first.log), second)
        })
    } else {
        let mut save = |_: usize, p: &ModelParameters| {
            p.save(&ckpt).map_err(TrainError::Model)
        };
        train_with(&dataset, init, &cfg.train, &TrainOptions::default(), &mut save).map(|o| (None, o))
    };
    match outcome {
        Ok((first_log, out)) => {
            out.params.save(&ckpt).map_err(|e| CliError::Training(e.to_string()))?;
            if let Some(log) = first_log {
                write_log(&run.out.join("train_log_stage1.csv"), &log)?;
            }
            write_log(&log_path, &out.log)?;
            println!(
                "trained {} epochs ({}), final l1 {:e}",
                out.epochs_run,
                if out.converged { "converged" } else { "epoch limit" },
                out.epoch_l1.last().copied().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Err(TrainError::Diverged { step, reason, last_good, log }) => {
            last_good.save(&ckpt).map_err(|e| CliError::Training(e.to_string()))?;
            write_log(&log_path, &log)?;
            Err(CliError::Training(format!(
                "diverged at step {step}: {reason}; last good parameters saved to {}",
                ckpt.display()
            )))
        }
        Err(e) => Err(train_error(e)),
    }
}

fn eval_error(e: EvalError) -> CliError {
    CliError::Evaluation(e.to_string())
}

fn load_model(run: &Run, eval: &EvalCommon) -> Result<ModelParameters, CliError> {
    let path = eval.model.clone().unwrap_or_else(|| run.out.join("model.json"));
    let params = ModelParameters::load(&path)
        .map_err(|e| CliError::Evaluation(format!("cannot load checkpoint {}: {e}", path.display())))?;
    check_model(&params, &run.plant, run.cfg.period)?;
    Ok(params)
}

/// Model and configured plant must agree on plant, dimension and period.
pub fn check_model(params: &ModelParameters, plant: &PlantSpec, period: f64) -> Result<(), CliError> {
    if params.meta.plant.id() != plant.id() || params.n() != plant.dim() {
        return Err(CliError::Evaluation(format!(
            "checkpoint was trained on {} (n = {}), configured plant is {} (n = {})",
            params.meta.plant.id(),
            params.n(),
            plant.id(),
            plant.dim()
        )));
    }
    if (params.meta.period - period).abs() > 1e-12 * period {
        return Err(CliError::Evaluation(format!(
            "checkpoint period {} differs from configured period {period}",
            params.meta.period
        )));
    }
    Ok(())
}

fn eval_run(eval: &EvalCommon, tweak: impl FnOnce(&mut RunConfig)) -> Result<Run, CliError> {
    let trajectories = eval.trajectories;
    load_run(&eval.common, |c| {
        if let Some(n) = trajectories {
            c.eval.n_traj = n;
        }
        tweak(c);
    })
}

#[derive(Serialize)]
struct DriftMetrics<'a> {
    plant: PlantId,
    period: f64,
    n_traj: usize,
    skipped_streams: &'a [u64],
    noise: NoiseSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    noise_study: Option<&'a NoiseStudyConfig>,
    reports: Vec<ReportSummary>,
}

fn write_drift(
    run: &Run,
    stem: &str,
    reports: &[EvaluationReport],
    skipped: &[u64],
    noise: NoiseSpec,
    noise_study: Option<&NoiseStudyConfig>,
) -> Result<(), CliError> {
    let csv = run.out.join(format!("{stem}.csv"));
    let file = fs::File::create(&csv).map_err(|e| CliError::Evaluation(e.to_string()))?;
    write_report_csv(reports, BufWriter::new(file)).map_err(eval_error)?;
    let metrics = DriftMetrics {
        plant: run.plant.id(),
        period: run.cfg.period,
        n_traj: run.cfg.eval.n_traj,
        skipped_streams: skipped,
        noise,
        noise_study,
        reports: reports.iter().map(|r| r.summary()).collect(),
    };
    write_json(&run.out.join(format!("{stem}.json")), &metrics, CliError::Evaluation)?;
    for r in reports {
        if let Some(e) = r.final_mean_error() {
            println!("{}: mean abs error at t = {} s: {e:e}", r.variant, r.time(r.steps() - 1));
        }
    }
    Ok(())
}

fn eval(kind: EvalCommand) -> Result<(), CliError> {
    match kind {
        EvalCommand::SingleStep { eval } => {
            let run = eval_run(&eval, |_| {})?;
            let params = load_model(&run, &eval)?;
            let set = fresh_trajectories(&run.plant, run.cfg.period, &run.cfg.eval_set(), &NoiseSpec::none())
                .map_err(eval_error)?;
            let region = run.cfg.eval.single_step_region.clone();
            let samples = held_out_samples(&set, region.as_deref());
            let report = single_step_eval(&params.view(), &run.plant, &samples, run.cfg.period, run.cfg.eval.substeps)
                .map_err(eval_error)?;
            let file = fs::File::create(run.out.join("single_step.csv")).map_err(|e| CliError::Evaluation(e.to_string()))?;
            report.write_csv(BufWriter::new(file)).map_err(eval_error)?;
            #[derive(Serialize)]
            struct Summary<'a> {
                samples: usize,
                region: Option<Vec<(f64, f64)>>,
                mean_abs_err: &'a [f64],
                max_abs_err: &'a [f64],
            }
            let summary = Summary { samples: samples.len(), region, mean_abs_err: &report.mean, max_abs_err: &report.max };
            write_json(&run.out.join("single_step.json"), &summary, CliError::Evaluation)?;
            println!("{} samples, mean abs error {:?}", samples.len(), report.mean);
            Ok(())
        }
        EvalCommand::Rollout { eval } => {
            let run = eval_run(&eval, |_| {})?;
            let params = load_model(&run, &eval)?;
            let set = fresh_trajectories(&run.plant, run.cfg.period, &run.cfg.eval_set(), &NoiseSpec::none())
                .map_err(eval_error)?;
            let mut reports = vec![evaluate_learned(&params.view(), &set).map_err(eval_error)?];
            reports.extend(analytic_reports(&run, &set, true)?);
            write_drift(&run, "rollout", &reports, &set.skipped, set.noise, None)
        }
        EvalCommand::Noise { eval, mode, variance } => {
            let run = eval_run(&eval, |c| {
                if let Some(m) = mode.as_deref() {
                    c.eval.noise.mode = if m == "process" { NoiseMode::Process } else { NoiseMode::Measurement };
                }
                if let Some(v) = variance {
                    c.eval.noise.variance = v;
                }
            })?;
            let params = load_model(&run, &eval)?;
            let study = &run.cfg.eval.noise;
            let noise_seed = run.cfg.eval_set().seed;
            let noise = match study.mode {
                NoiseMode::Measurement => NoiseSpec::measurement(study.variance, noise_seed),
                NoiseMode::Process => NoiseSpec::process(study.variance, noise_seed),
            };
            let set = fresh_trajectories(&run.plant, run.cfg.period, &run.cfg.eval_set(), &noise).map_err(|e| match e {
                EvalError::Plant(p) => CliError::Config(p.to_string()),
                other => eval_error(other),
            })?;
            let mut reports = vec![evaluate_learned(&params.view(), &set).map_err(eval_error)?];
            reports.extend(analytic_reports(&run, &set, false)?);
            write_drift(&run, "noise", &reports, &set.skipped, noise, Some(&run.cfg.eval.noise))
        }
        EvalCommand::LinearReport { eval } => {
            let run = eval_run(&eval, |_| {})?;
            let params = load_model(&run, &eval)?;
            let view = params.view();
            let eps2 = params.meta.loss.eps2;
            let report = linear_report(&view.a(), &view.b(), eps2).map_err(eval_error)?;
            write_json(&run.out.join("linear_report.json"), &report, CliError::Evaluation)?;
            let eig: Vec<String> = report.eigenvalues.iter().map(|p| format!("{}{:+}i", p.re, p.im)).collect();
            println!("eigenvalues [{}], |det Γ| = {:e}, |det A| = {}", eig.join(", "), report.abs_det_gamma, report.abs_det_a);
            Ok(())
        }
        EvalCommand::ClosedLoop { eval, poles, xeq, x0, horizon } => {
            let run = eval_run(&eval, |c| {
                let cl = &mut c.eval.closed_loop;
                if let Some(p) = poles {
                    cl.poles = Some(p.into_iter().map(Pole::real).collect());
                }
                if xeq.is_some() {
                    cl.x_eq = xeq;
                }
                if x0.is_some() {
                    cl.x0 = x0;
                }
                if let Some(h) = horizon {
                    cl.horizon = h;
                }
            })?;
            let params = load_model(&run, &eval)?;
            let (x0, spec) = run.cfg.closed_loop(run.plant.dim());
            let outcome = closed_loop_sim(&params.view(), &run.plant, &x0, &spec, run.cfg.period).map_err(|e| match e {
                EvalError::Config(m) | EvalError::InvalidPoles(m) => CliError::Config(m),
                other => eval_error(other),
            })?;
            for (name, traj) in [("closed_loop.csv", &outcome.controlled), ("closed_loop_reference.csv", &outcome.reference)] {
                let file = fs::File::create(run.out.join(name)).map_err(|e| CliError::Evaluation(e.to_string()))?;
                traj.write_csv(BufWriter::new(file)).map_err(|e| CliError::Evaluation(e.to_string()))?;
            }
            write_json(&run.out.join("closed_loop.json"), &outcome.metrics, CliError::Evaluation)?;
            let m = &outcome.metrics;
            println!(
                "settling time {:?} s (v = 0: {:?} s), final norm {:e}",
                m.controlled.settling_time, m.reference.settling_time, m.controlled.final_norm
            );
            Ok(())
        }
        EvalCommand::Analytic { eval, perturbed } => {
            let run = eval_run(&eval, |_| {})?;
            let set = fresh_trajectories(&run.plant, run.cfg.period, &run.cfg.eval_set(), &NoiseSpec::none())
                .map_err(eval_error)?;
            let (model, variant) = if perturbed {
                let m = NominalModel::documented_perturbation(&run.plant).map_err(|e| CliError::Config(e.to_string()))?;
                (m, Variant::AnalyticPerturbed)
            } else {
                (NominalModel::exact(&run.plant).map_err(|e| CliError::Config(e.to_string()))?, Variant::AnalyticExact)
            };
            let report = evaluate_analytic(&model, variant, &set).map_err(eval_error)?;
            write_drift(&run, "analytic", &[report], &set.skipped, set.noise, None)
        }
    }
}

/// Exact and, when `perturbed` and one is documented, perturbed analytic
/// baselines.
fn analytic_reports(
    run: &Run,
    set: &flforge_core::evalharness::EvalTrajectories,
    perturbed: bool,
) -> Result<Vec<EvaluationReport>, CliError> {
    let mut out = vec![evaluate_analytic(
        &NominalModel::exact(&run.plant).map_err(|e| CliError::Config(e.to_string()))?,
        Variant::AnalyticExact,
        set,
    )
    .map_err(eval_error)?];
    if perturbed && run.plant.id() != PlantId::Chain {
        let model = NominalModel::documented_perturbation(&run.plant).map_err(|e| CliError::Config(e.to_string()))?;
        out.push(evaluate_analytic(&model, Variant::AnalyticPerturbed, set).map_err(eval_error)?);
    }
    Ok(out)
}
