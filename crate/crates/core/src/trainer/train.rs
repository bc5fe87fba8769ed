use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_norm, AdamConfig, AdamState};
use super::TrainError;
use crate::diffcore::Tape;
use crate::excite::{Dataset, Window, WindowSampler};
use crate::flmodel::{
    loss_l1, loss_l3, pair_terms, predict_window, InputLaw, LossBreakdown, LossConfig, ModelParameters,
    RolloutMode,
};
use crate::plants::fmt17;

/// Windows evaluated on one tape. The batch is always split the same way,
/// so the ordered reduction gives identical sums for any thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
    /// Rollout length m of each window.
    pub window: usize,
    /// Stop when ℒ₁ improved by less than `min_relative_improvement` over
    /// this many epochs.
    pub patience: usize,
    pub min_relative_improvement: f64,
    pub two_stage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            batch_size: 32,
            epochs: 100,
            clip_norm: 10.0,
            seed: 0,
            window: 16,
            patience: 10,
            min_relative_improvement: 1e-5,
            two_stage: false,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return err("learning_rate must be > 0");
        }
        if self.batch_size < 1 {
            return err("batch_size must be ≥ 1");
        }
        if self.window < 1 {
            return err("window must be ≥ 1");
        }
        if !(self.clip_norm > 0.0) {
            return err("clip_norm must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return err("Adam constants out of range");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Wall time since the start of training.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "step,l1,l2,l3,l4,lw,total,detGamma,detWl,maxv,seconds";

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", Self::HEADER)?;
        for r in &self.rows {
            let l = &r.loss;
            let cells = [l.l1, l.l2, l.l3, l.l4, l.lw, l.total, l.det_gamma, l.det_wl, l.max_v, r.seconds];
            let joined: Vec<String> = cells.iter().map(|v| fmt17(*v)).collect();
            writeln!(w, "{},{}", r.step, joined.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Parameters excluded from updates.
    pub frozen: Option<Vec<bool>>,
    /// Feed `u ≡ 0` to the model whatever the data set holds.
    pub zero_input: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParameters,
    pub log: TrainLog,
    pub epochs_run: usize,
    pub converged: bool,
    /// Mean ℒ₁ of every epoch.
    pub epoch_l1: Vec<f64>,
}

struct ChunkResult {
    grad: Vec<f64>,
    l1: f64,
    l3: f64,
    max_v: f64,
}

fn chunk_gradient(
    params: &ModelParameters,
    windows: &[Window<'_>],
    cfg: &LossConfig,
    batch_len: usize,
) -> Result<ChunkResult, TrainError> {
    let tape = Tape::with_capacity(20_000 * windows.len());
    let p = tape.vars(&params.values);
    let view = params.view_with(&p);
    let weights = cfg.weights(params.n());
    let mut objective = None;
    let (mut l1_sum, mut l3_sum, mut max_v) = (0.0, 0.0, 0.0_f64);
    for w in windows {
        let pred = predict_window(&view, w, RolloutMode::Measured)?;
        let l1 = loss_l1(w, &pred.states, &weights);
        let used = &pred.v[1..];
        let l3 = loss_l3(used, cfg.eps3);
        l1_sum += l1.value();
        l3_sum += l3.value();
        max_v = used.iter().fold(max_v, |m, v| m.max(v.value().abs()));
        let mut term = None;
        for (a, t) in [(cfg.a1, l1), (cfg.a3, l3)] {
            if a != 0.0 {
                let scaled = t * (a / batch_len as f64);
                term = Some(term.map_or(scaled, |s| s + scaled));
            }
        }
        if let Some(t) = term {
            objective = Some(objective.map_or(t, |o| o + t));
        }
    }
    let grad = match objective {
        Some(o) => tape.gradient(o)?.collect(&p),
        None => vec![0.0; p.len()],
    };
    Ok(ChunkResult { grad, l1: l1_sum, l3: l3_sum, max_v })
}

/// Gradient of the mean total loss over `windows`, with its breakdown.
pub fn batch_gradient(
    params: &ModelParameters,
    windows: &[Window<'_>],
    cfg: &LossConfig,
) -> Result<(Vec<f64>, LossBreakdown), TrainError> {
    assert!(!windows.is_empty(), "empty batch");
    let tape = Tape::new();
    let p = tape.vars(&params.values);
    let view = params.view_with(&p);
    let [l2, l4, lw, det_gamma, det_wl] = pair_terms(&view, &view.w_l(), cfg)?;
    let mut pair_objective = None;
    for (a, t) in [(cfg.a2, l2), (cfg.a4, l4), (cfg.a_w, lw)] {
        if a != 0.0 {
            let scaled = t * a;
            pair_objective = Some(pair_objective.map_or(scaled, |s| s + scaled));
        }
    }
    let mut grad = match pair_objective {
        Some(o) => tape.gradient(o)?.collect(&p),
        None => vec![0.0; p.len()],
    };
    let pair_value = pair_objective.map_or(0.0, |o| o.value());

    let chunks: Vec<Result<ChunkResult, TrainError>> = windows
        .par_chunks(GRAD_CHUNK)
        .map(|c| chunk_gradient(params, c, cfg, windows.len()))
        .collect();
    let (mut l1, mut l3, mut max_v) = (0.0, 0.0, 0.0_f64);
    for c in chunks {
        let c = c?;
        for (g, cg) in grad.iter_mut().zip(&c.grad) {
            *g += cg;
        }
        l1 += c.l1;
        l3 += c.l3;
        max_v = max_v.max(c.max_v);
    }
    let count = windows.len() as f64;
    let (l1, l3) = (l1 / count, l3 / count);
    let mut total = pair_value;
    if cfg.a1 != 0.0 {
        total += cfg.a1 * l1;
    }
    if cfg.a3 != 0.0 {
        total += cfg.a3 * l3;
    }
    let breakdown = LossBreakdown {
        l1,
        l2: l2.value(),
        l3,
        l4: l4.value(),
        lw: lw.value(),
        total,
        det_gamma: det_gamma.value(),
        det_wl: det_wl.value(),
        max_v,
    };
    Ok((grad, breakdown))
}

/// Trains `init` on `dataset` with default options and no epoch hook.
pub fn train(dataset: &Dataset, init: ModelParameters, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with(dataset, init, cfg, &TrainOptions::default(), &mut |_, _| Ok(()))
}

/// Full training loop; `on_epoch(epoch, params)` runs after every epoch
/// (checkpointing).
pub fn train_with(
    dataset: &Dataset,
    init: ModelParameters,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    on_epoch: &mut dyn FnMut(usize, &ModelParameters) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.dim() != init.n() {
        return Err(TrainError::Mismatch(format!(
            "data set has n = {}, model has n = {}",
            dataset.dim(),
            init.n()
        )));
    }
    if (dataset.period() - init.meta.period).abs() > 1e-12 * init.meta.period {
        return Err(TrainError::Mismatch(format!(
            "data set period {} differs from model period {}",
            dataset.period(),
            init.meta.period
        )));
    }
    if let Some(f) = &opts.frozen {
        if f.len() != init.values.len() {
            return Err(TrainError::Config("frozen mask length differs from parameter count".into()));
        }
    }
    let sampler = WindowSampler::new(dataset, cfg.window)?;
    let zeros = vec![0.0; cfg.window + 1];
    let adam = cfg.adam();
    let loss_cfg = init.meta.loss.clone();
    let mut params = init;
    let mut state = AdamState::new(params.values.len());
    let mut log = TrainLog::default();
    let mut epoch_l1 = Vec::new();
    let mut converged = false;
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let order = sampler.epoch(&mut rng);
        let mut l1_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let windows: Vec<Window<'_>> = batch
                .iter()
                .map(|&r| {
                    let w = sampler.get(r);
                    if opts.zero_input {
                        Window { inputs: &zeros, ..w }
                    } else {
                        w
                    }
                })
                .collect();
            let step = state.step + 1;
            let last_good = params.clone();
            let diverged = |reason: String, log: &TrainLog| TrainError::Diverged {
                step,
                reason,
                last_good: Box::new(last_good.clone()),
                log: log.clone(),
            };
            let (mut grad, breakdown) = match batch_gradient(&params, &windows, &loss_cfg) {
                Ok(r) => r,
                Err(e) => return Err(diverged(e.to_string(), &log)),
            };
            if !breakdown.total.is_finite() {
                return Err(diverged(format!("non-finite loss {breakdown:?}"), &log));
            }
            if let Some(f) = &opts.frozen {
                grad.iter_mut().zip(f).filter(|(_, &fz)| fz).for_each(|(g, _)| *g = 0.0);
            }
            clip_norm(&mut grad, cfg.clip_norm);
            if let Err(e) = adam_step(&mut params.values, &grad, &mut state, &adam, opts.frozen.as_deref()) {
                return Err(diverged(e.to_string(), &log));
            }
            log.rows.push(TrainLogRow {
                step,
                loss: breakdown,
                seconds: start.elapsed().as_secs_f64(),
            });
            l1_sum += breakdown.l1;
            batches += 1;
        }
        epoch_l1.push(l1_sum / batches.max(1) as f64);
        on_epoch(epoch, &params)?;
        let e = epoch_l1.len();
        if cfg.patience > 0 && e > cfg.patience {
            let before = epoch_l1[e - 1 - cfg.patience];
            let now = epoch_l1[e - 1];
            if (before - now) / before.abs().max(f64::MIN_POSITIVE) < cfg.min_relative_improvement {
                converged = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        epochs_run: epoch_l1.len(),
        converged,
        epoch_l1,
    })
}

/// Two-stage training: first the zero-input law `v = γ(x)` on
/// `zero_input_data` (inputs are never read), then β, φ and `(A, B)` on
/// `dataset` with γ frozen, `v = u/β(x) + γ(x)`.
pub fn train_two_stage(
    zero_input_data: &Dataset,
    dataset: &Dataset,
    init: ModelParameters,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, TrainOutcome), TrainError> {
    if init.meta.architecture.input_law != InputLaw::GammaBeta {
        return Err(TrainError::Config("two-stage training needs the gamma_beta input law".into()));
    }
    let first = train_with(
        zero_input_data,
        init,
        cfg,
        &TrainOptions { frozen: None, zero_input: true },
        &mut |_, _| Ok(()),
    )?;
    let mut frozen = vec![false; first.params.values.len()];
    for f in &mut frozen[first.params.offset_net_range()] {
        *f = true;
    }
    let second = train_with(
        dataset,
        first.params.clone(),
        &TrainConfig { seed: cfg.seed.wrapping_add(1), ..cfg.clone() },
        &TrainOptions { frozen: Some(frozen), zero_input: false },
        &mut |_, _| Ok(()),
    )?;
    Ok((first, second))
}
