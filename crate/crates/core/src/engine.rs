//! Continual-learning loop: train each task with frozen-bit clipping, then
//! estimate how much was learned about every parameter and freeze that many
//! leading bits.

use std::ops::Range;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fisher::{estimate_fisher, fisher_recursion, FisherVector};
use crate::metrics::{
    frozen_bit_histogram, AccuracyMatrix, IgSummary, LayerHistogram, LayerSummary, RunReport, TaskRecord,
    SCHEMA_VERSION,
};
use crate::nn::{Network, NetworkSpec, OptimConfig, ParamMode, PlateauSchedule};
use crate::parallel::map_indexed;
use crate::quant::FrozenInterval;
use crate::tasks::{rng_for, Dataset, TaskData, TaskStream};

/// Floor applied to both sides of the information-gain ratio.
pub const IG_FLOOR: f64 = 1e-30;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Blip,
    /// Plain sequential fine-tuning.
    Ft,
    /// Fine-tuning with the backbone fixed after the first task.
    FtFix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IgFormula {
    /// `½·log2((t·F_prev + F_t) / (t·F_prev))`, never negative.
    Eq8,
    /// `½·log2((t·F_prev + F_t) / ((t+1)·F_prev))`, may be negative.
    #[default]
    Appendix14,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlipConfig {
    /// Prior Fisher value before any task.
    #[serde(default = "BlipConfig::default_f0")]
    pub f0: f64,
    #[serde(default)]
    pub formula: IgFormula,
    /// Estimate Fisher on at most this many training points per task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_fisher_samples: Option<usize>,
}

impl BlipConfig {
    fn default_f0() -> f64 {
        5e-16
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return Err(Error::config("blip.f0", "must be positive"));
        }
        if self.max_fisher_samples == Some(0) {
            return Err(Error::config("blip.max_fisher_samples", "must be positive"));
        }
        Ok(())
    }
}

impl Default for BlipConfig {
    fn default() -> Self {
        BlipConfig {
            f0: Self::default_f0(),
            formula: IgFormula::default(),
            max_fisher_samples: None,
        }
    }
}

/// Element-wise information gain in bits.
pub fn info_gain(prev: &FisherVector, current: &FisherVector, t: usize, formula: IgFormula) -> Result<Vec<f64>> {
    if t == 0 {
        return Err(Error::config("t", "must be at least 1"));
    }
    if prev.len() != current.len() {
        return Err(Error::Misaligned {
            expected: prev.len(),
            got: current.len(),
        });
    }
    Ok(prev
        .values
        .iter()
        .zip(&current.values)
        .map(|(&p, &c)| ig_one(p, c, t, formula))
        .collect())
}

fn ig_one(prev: f64, current: f64, t: usize, formula: IgFormula) -> f64 {
    let tf = t as f64;
    let posterior = (tf * prev + current).max(IG_FLOOR);
    let prior = match formula {
        IgFormula::Eq8 => tf * prev,
        IgFormula::Appendix14 => (tf + 1.0) * prev,
    }
    .max(IG_FLOOR);
    0.5 * (posterior / prior).log2()
}

/// Bits to freeze now: `clamp(ceil(ig), 0, N - S)`.
pub fn freeze_bits(ig: &[f64], frozen: &[u8], total_bits: u32) -> Result<Vec<u8>> {
    if ig.len() != frozen.len() {
        return Err(Error::Misaligned {
            expected: frozen.len(),
            got: ig.len(),
        });
    }
    ig.iter()
        .zip(frozen)
        .map(|(&g, &s)| {
            let room = total_bits.checked_sub(u32::from(s)).ok_or(Error::CapacityOverflow {
                requested: u32::from(s),
                total: total_bits,
            })?;
            // NaN (impossible after flooring) freezes nothing
            let want = if g > 0.0 { g.ceil().min(f64::from(room)) } else { 0.0 };
            Ok(want as u8)
        })
        .collect()
}

/// Everything the engine remembers between tasks.
#[derive(Debug, Clone)]
pub struct BlipState {
    total_bits: u32,
    f0: f64,
    scales: Vec<f64>,
    frozen_bits: Vec<u8>,
    anchors: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    fisher: FisherVector,
    theta_snapshot: Vec<f64>,
    task_index: usize,
}

impl BlipState {
    /// Nothing frozen: every parameter may roam its layer's full range.
    pub fn new(net: &Network, total_bits: u32, f0: f64) -> Self {
        let scales = net.param_scales();
        let n = scales.len();
        BlipState {
            total_bits,
            f0,
            lower: scales.iter().map(|s| -s).collect(),
            upper: scales.clone(),
            scales,
            frozen_bits: vec![0; n],
            anchors: vec![0.0; n],
            fisher: FisherVector::prior(n, f0),
            theta_snapshot: net.params().to_vec(),
            task_index: 0,
        }
    }

    pub fn total_bits(&self) -> u32 {
        self.total_bits
    }

    pub fn f0(&self) -> f64 {
        self.f0
    }

    pub fn frozen_bits(&self) -> &[u8] {
        &self.frozen_bits
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Per-parameter closed interval parameters are clipped into.
    pub fn bounds(&self, i: usize) -> (f64, f64) {
        (self.lower[i], self.upper[i])
    }

    pub fn fisher(&self) -> &FisherVector {
        &self.fisher
    }

    /// Parameters as they were when the last task finished.
    pub fn theta_snapshot(&self) -> &[f64] {
        &self.theta_snapshot
    }

    /// Number of tasks completed.
    pub fn task_index(&self) -> usize {
        self.task_index
    }

    /// Clips `params[range]` into the frozen bounds.
    pub fn clip(&self, params: &mut [f64], range: Range<usize>) {
        for ((p, &lo), &hi) in params[range.clone()]
            .iter_mut()
            .zip(&self.lower[range.clone()])
            .zip(&self.upper[range])
        {
            *p = p.clamp(lo, hi);
        }
    }

    /// Adds `n_t` frozen bits, re-anchors every parameter that gained bits at
    /// its new prefix, and closes the task.
    pub fn update_anchor(&mut self, n_t: &[u8], theta: &[f64]) -> Result<()> {
        let len = self.frozen_bits.len();
        for v in [n_t.len(), theta.len()] {
            if v != len {
                return Err(Error::Misaligned { expected: len, got: v });
            }
        }
        if let Some((&s, &n)) = self
            .frozen_bits
            .iter()
            .zip(n_t)
            .find(|(&s, &n)| u32::from(s) + u32::from(n) > self.total_bits)
        {
            return Err(Error::CapacityOverflow {
                requested: u32::from(s) + u32::from(n),
                total: self.total_bits,
            });
        }
        for i in 0..len {
            if n_t[i] == 0 {
                continue;
            }
            let bits = self.frozen_bits[i] + n_t[i];
            let interval = FrozenInterval::around(theta[i], u32::from(bits), self.scales[i])?;
            let (lo, hi) = interval.bounds();
            self.frozen_bits[i] = bits;
            self.anchors[i] = interval.anchor();
            self.lower[i] = self.lower[i].max(lo);
            self.upper[i] = self.upper[i].min(hi);
            debug_assert!(self.lower[i] <= theta[i] && theta[i] <= self.upper[i]);
        }
        self.theta_snapshot.copy_from_slice(theta);
        self.task_index += 1;
        Ok(())
    }

    /// Pins `range` to its current values for the rest of the run.
    pub fn pin(&mut self, theta: &[f64], range: Range<usize>) {
        self.lower[range.clone()].copy_from_slice(&theta[range.clone()]);
        self.upper[range.clone()].copy_from_slice(&theta[range]);
    }
}

/// What happened while training one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_lr: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
}

fn mean_loss(net: &Network, data: &Dataset, task_id: usize, mode: ParamMode) -> Result<f64> {
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let (x, y) = data.slice(start..(start + EVAL_CHUNK).min(data.len()));
        total += net.evaluate(x.view(), y, task_id, mode)?.0;
    }
    Ok(total / data.len() as f64)
}

/// Test accuracy of the head for `task_id` on `data`.
pub fn accuracy(net: &Network, data: &Dataset, task_id: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData("evaluation set"));
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let (x, y) = data.slice(start..(start + EVAL_CHUNK).min(data.len()));
        correct += net.evaluate(x.view(), y, task_id, ParamMode::Raw)?.1;
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Minibatch SGD on `task` over the parameters in `trainable`, clipping them
/// into the frozen bounds after every step, until the plateau schedule stops.
/// Validation loss drives the schedule (training loss when there is no
/// validation split).
pub fn train_task<R: Rng + ?Sized>(
    state: &BlipState,
    net: &mut Network,
    task: &TaskData,
    trainable: &[Range<usize>],
    optim: &OptimConfig,
    ste_bits: Option<u32>,
    rng: &mut R,
) -> Result<TrainSummary> {
    if task.task_id != state.task_index + 1 {
        return Err(Error::config(
            "task_id",
            format!("expected task {}, got {}", state.task_index + 1, task.task_id),
        ));
    }
    if task.train.is_empty() {
        return Err(Error::EmptyData("training set"));
    }
    let diverged = || Error::Diverged {
        task: Some(task.task_id),
    };
    let mode = ste_bits.map_or(ParamMode::Raw, |total_bits| ParamMode::Quantized { total_bits });
    let monitor = if task.val.is_empty() { &task.train } else { &task.val };
    let initial_val_loss = mean_loss(net, monitor, task.task_id, ParamMode::Raw)?;

    let mut schedule = PlateauSchedule::new(*optim);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut grads = vec![0.0; net.num_params()];
    let mut val_loss;
    loop {
        order.shuffle(rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(optim.batch) {
            let x = task.train.gather(batch);
            let y = task.train.gather_labels(batch);
            let loss = net.backward_into(x.view(), &y, task.task_id, mode, &mut grads)?;
            if !loss.is_finite() {
                return Err(diverged());
            }
            train_loss += loss * batch.len() as f64;
            net.sgd_step_clamped(&grads, schedule.lr(), trainable, &state.lower, &state.upper)
                .map_err(|e| match e {
                    Error::Diverged { .. } => diverged(),
                    other => other,
                })?;
        }
        train_loss /= task.train.len() as f64;
        val_loss = mean_loss(net, monitor, task.task_id, ParamMode::Raw)?;
        if !val_loss.is_finite() {
            return Err(diverged());
        }
        let lr = schedule.lr();
        let step = schedule.step(val_loss);
        info!(
            "task {} epoch {:>3} lr {:.3e} train_loss {:.5} val_loss {:.5}",
            task.task_id,
            schedule.epoch(),
            lr,
            train_loss,
            val_loss
        );
        if step.stop {
            break;
        }
    }
    Ok(TrainSummary {
        epochs: schedule.epoch(),
        final_lr: schedule.lr(),
        initial_val_loss,
        final_val_loss: val_loss,
    })
}

/// Fisher estimation, information gain, bit freezing and the running Fisher
/// update for the task just trained. Only the backbone and the task's head
/// are tracked; every other parameter keeps its Fisher value and gains no
/// bits. Returns the bits added per parameter and the gain summary.
pub fn consolidate<R: Rng + ?Sized>(
    state: &mut BlipState,
    net: &Network,
    task: &TaskData,
    config: &BlipConfig,
    rng: &mut R,
) -> Result<(Vec<u8>, IgSummary)> {
    let t = state.task_index + 1;
    let current = estimate_fisher(net, &task.train, task.task_id, rng, config.max_fisher_samples)?;
    let tracked = net.active_ranges(task.task_id)?;
    let mut ig = vec![0.0; net.num_params()];
    let mut next = state.fisher.clone();
    let mut stats = (0usize, 0.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for range in tracked.iter().cloned() {
        let prev = FisherVector {
            values: state.fisher.values[range.clone()].to_vec(),
            task_count: state.fisher.task_count,
        };
        let cur = FisherVector {
            values: current.values[range.clone()].to_vec(),
            task_count: 1,
        };
        let gains = info_gain(&prev, &cur, t, config.formula)?;
        for &g in &gains {
            stats.0 += 1;
            stats.1 += g;
            stats.2 = stats.2.min(g);
            stats.3 = stats.3.max(g);
        }
        ig[range.clone()].copy_from_slice(&gains);
        next.values[range].copy_from_slice(&fisher_recursion(&prev, &cur, t)?.values);
    }
    next.task_count = t;
    let n_t = freeze_bits(&ig, &state.frozen_bits, state.total_bits)?;
    let mut histogram = vec![0u64; state.total_bits as usize + 1];
    for &n in &n_t {
        histogram[n as usize] += 1;
    }
    state.fisher = next;
    let summary = IgSummary {
        formula: config.formula,
        tracked: stats.0,
        mean: stats.1 / stats.0.max(1) as f64,
        min: stats.2,
        max: stats.3,
        histogram,
    };
    Ok((n_t, summary))
}

/// Snapshot handed to an observer after every completed task.
pub struct Checkpoint<'a> {
    pub task_id: usize,
    pub net: &'a Network,
    pub state: &'a BlipState,
    pub report: &'a RunReport,
}

/// A run that stopped early; `report` holds every completed task.
#[derive(Debug)]
pub struct RunFailure {
    pub report: Box<RunReport>,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

// Purpose tags for derived random streams.
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 100;
const TAG_FISHER: u64 = 200;

pub fn run_continual(stream: &TaskStream, config: &RunConfig, seed: u64) -> std::result::Result<RunReport, RunFailure> {
    run_continual_with(stream, config, seed, |_| {})
}

/// Runs every task of `stream` in order, calling `observe` after each one.
pub fn run_continual_with<F>(
    stream: &TaskStream,
    config: &RunConfig,
    seed: u64,
    mut observe: F,
) -> std::result::Result<RunReport, RunFailure>
where
    F: FnMut(&Checkpoint<'_>),
{
    let spec = NetworkSpec {
        input_dim: stream.input_dim(),
        hidden_dims: config.model.hidden_dims.clone(),
        activation: config.model.activation,
        heads: stream.heads(),
    };
    let mut report = RunReport {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        seed,
        stream: stream.name.clone(),
        strategy: config.strategy,
        total_bits: config.quant.total_bits,
        num_params: 0,
        layers: Vec::new(),
        accuracy_matrix: AccuracyMatrix::new(stream.len()),
        acc: None,
        bwt: None,
        bwt_degenerate: false,
        tasks: Vec::new(),
        completed: false,
        error: None,
        frozen_snapshots: Vec::new(),
        wall_clock_secs: Vec::new(),
    };
    let result = (|| -> Result<()> {
        config.validate()?;
        if stream.is_empty() {
            return Err(Error::EmptyData("task stream"));
        }
        let mut net = Network::init(spec, &config.quant, &mut rng_for(seed, TAG_INIT))?;
        report.num_params = net.num_params();
        report.layers = net.layers().iter().map(LayerSummary::from).collect();
        let layer_ranges: Vec<Range<usize>> = net.layers().iter().map(|l| l.range()).collect();
        let mut state = BlipState::new(&net, config.quant.total_bits, config.blip.f0);
        let ste_bits = config.quant.ste_enabled.then_some(config.quant.total_bits);

        for task in &stream.tasks {
            let started = Instant::now();
            let t = task.task_id;
            let [backbone, head] = net.active_ranges(t)?;
            let trainable = match config.strategy {
                Strategy::FtFix if t > 1 => vec![head],
                _ => vec![backbone.clone(), head],
            };
            let summary = train_task(
                &state,
                &mut net,
                task,
                &trainable,
                &config.optim,
                ste_bits,
                &mut rng_for(seed, TAG_SHUFFLE + t as u64),
            )?;
            let before = state.frozen_bits.clone();
            let (n_t, ig) = match config.strategy {
                Strategy::Blip => {
                    let (n_t, ig) = consolidate(
                        &mut state,
                        &net,
                        task,
                        &config.blip,
                        &mut rng_for(seed, TAG_FISHER + t as u64),
                    )?;
                    (n_t, Some(ig))
                }
                Strategy::Ft | Strategy::FtFix => (vec![0; net.num_params()], None),
            };
            state.update_anchor(&n_t, net.params())?;
            if config.strategy == Strategy::FtFix && t == 1 {
                state.pin(net.params(), backbone);
            }

            let row = map_indexed(t, |j| accuracy(&net, &stream.tasks[j].test, j + 1))
                .into_iter()
                .collect::<Result<Vec<f64>>>()?;
            info!("task {t} accuracies {row:?}");
            report.accuracy_matrix.push_row(row)?;

            let added = frozen_bit_histogram(&before, &state.frozen_bits, &layer_ranges, state.total_bits)?;
            let cumulative = frozen_bit_histogram(
                &vec![0; before.len()],
                &state.frozen_bits,
                &layer_ranges,
                state.total_bits,
            )?;
            let named = |hists: Vec<Vec<u64>>| -> Vec<LayerHistogram> {
                hists
                    .into_iter()
                    .zip(&report.layers)
                    .map(|(counts, l)| LayerHistogram {
                        layer: l.name.clone(),
                        counts,
                    })
                    .collect()
            };
            let record = TaskRecord {
                task_id: t,
                description: task.description.clone(),
                epochs: summary.epochs,
                final_lr: summary.final_lr,
                initial_val_loss: summary.initial_val_loss,
                final_val_loss: summary.final_val_loss,
                ig,
                added_bits: named(added),
                frozen_bits: named(cumulative),
                total_frozen_bits: state.frozen_bits.iter().map(|&s| u64::from(s)).sum(),
            };
            report.tasks.push(record);
            report.frozen_snapshots.push(state.frozen_bits.clone());
            report.wall_clock_secs.push(started.elapsed().as_secs_f64());
            observe(&Checkpoint {
                task_id: t,
                net: &net,
                state: &state,
                report: &report,
            });
        }
        Ok(())
    })();
    report.finalize_metrics();
    match result {
        Ok(()) => {
            report.completed = true;
            Ok(report)
        }
        Err(error) => {
            report.error = Some(error.to_string());
            Err(RunFailure {
                report: Box::new(report),
                error,
            })
        }
    }
}
