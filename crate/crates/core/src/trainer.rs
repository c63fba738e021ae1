//! SGD training with optional penalties, metric tracking and the scenario
//! runners built on it.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::graph::{ForwardContext, Graph};
use crate::kernel::{alignment, batch_kernel, logdet_metric, trace_metric, DEFAULT_RANK_TOL};
use crate::loss::{argmax_rows, record_loss, LossKind, Targets};
use crate::models::{build, init, ArchSpec, InitSpec};
use crate::regularisers::{regularised_loss_and_grad, RegulariserConfig};
use crate::tensor::{ParamVector, Tensor};

/// Rows per forward pass when evaluating whole datasets.
const EVAL_CHUNK: usize = 500;

/// Number of trailing metric samples averaged into a final value.
pub const FINAL_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum MetricBatch {
    /// The training batch of the sampled step, with that step's dropout mask.
    Current,
    /// The first `size` training samples in evaluation mode.
    Probe { size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub metric_samples: usize,
    pub regulariser: RegulariserConfig,
    pub arch: ArchSpec,
    pub loss: LossKind,
    pub metric_batch: MetricBatch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            lr_decay: 0.99,
            batch_size: 32,
            epochs: 1,
            seed: 0,
            metric_samples: 100,
            regulariser: RegulariserConfig::none(),
            arch: ArchSpec::fcn(6, 300),
            loss: LossKind::SoftmaxCrossEntropy,
            metric_batch: MetricBatch::Current,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    /// Learning rate during `epoch` (0-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }

    /// Number of metric rows a run over `n` samples records: the requested
    /// count, capped at the number of optimisation steps.
    pub fn effective_metric_samples(&self, n: usize) -> usize {
        self.metric_samples.min(self.total_steps(n))
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!(
                "lr decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.metric_samples == 0 {
            return Err(Error::invalid("metric_samples must be at least 1"));
        }
        if n == 0 {
            return Err(Error::invalid("training set is empty"));
        }
        if let MetricBatch::Probe { size } = self.metric_batch {
            if size == 0 || size > n {
                return Err(Error::invalid(format!("probe batch size {size} must be in 1..={n}")));
            }
        }
        RegulariserConfig::new(self.regulariser.kind, self.regulariser.alpha)?;
        Ok(())
    }
}

/// Steps (1-based, after the update) at which metrics are recorded:
/// `round(k·T/S)` for `k = 1..=S`.
pub fn metric_schedule(total_steps: usize, samples: usize) -> Vec<usize> {
    let s = samples.min(total_steps);
    (1..=s).map(|k| (2 * k * total_steps + s) / (2 * s)).collect()
}

/// Independent seed streams derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SHUFFLE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
    pub tr_k: f64,
    pub logdet_k: Option<f64>,
    pub alignment: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTrace {
    pub rows: Vec<MetricRow>,
    /// Wall-clock milliseconds since the start of the run, per row. Kept
    /// apart from the rows so that traces compare bit-exactly.
    pub wall_ms: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::invalid(format!("bad number `{s}` in metrics CSV")))
}

impl MetricTrace {
    pub const CSV_HEADER: &'static str = "step,epoch,train_loss,test_loss,test_accuracy,tr_K,logdet_K,alignment";

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The metrics as CSV. Missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.epoch,
                r.train_loss,
                r.test_loss,
                opt(r.test_accuracy),
                r.tr_k,
                opt(r.logdet_k),
                opt(r.alignment)
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_ms\n");
        for (r, ms) in self.rows.iter().zip(&self.wall_ms) {
            let _ = writeln!(s, "{},{ms:.3}", r.step);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::invalid("metrics CSV header mismatch"));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(Error::invalid(format!("metrics CSV row has {} fields", f.len())));
            }
            let num = |s: &str| parse_opt(s)?.ok_or_else(|| Error::invalid("missing required metric"));
            rows.push(MetricRow {
                step: f[0].parse().map_err(|_| Error::invalid("bad step"))?,
                epoch: f[1].parse().map_err(|_| Error::invalid("bad epoch"))?,
                train_loss: num(f[2])?,
                test_loss: num(f[3])?,
                test_accuracy: parse_opt(f[4])?,
                tr_k: num(f[5])?,
                logdet_k: parse_opt(f[6])?,
                alignment: parse_opt(f[7])?,
            });
        }
        Ok(Self {
            rows,
            wall_ms: Vec::new(),
        })
    }

    pub fn column(&self, metric: Metric) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| metric.get(r)).collect()
    }

    /// Mean of the last [`FINAL_WINDOW`] present values of a column.
    pub fn final_value(&self, metric: Metric) -> Option<f64> {
        final_of(&self.column(metric))
    }
}

fn final_of(col: &[Option<f64>]) -> Option<f64> {
    let tail: Vec<f64> = col.iter().rev().filter_map(|v| *v).take(FINAL_WINDOW).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TrainLoss,
    TestLoss,
    TestAccuracy,
    TrK,
    LogdetK,
    Alignment,
}

impl Metric {
    pub fn get(self, r: &MetricRow) -> Option<f64> {
        match self {
            Metric::TrainLoss => Some(r.train_loss),
            Metric::TestLoss => Some(r.test_loss),
            Metric::TestAccuracy => r.test_accuracy,
            Metric::TrK => Some(r.tr_k),
            Metric::LogdetK => r.logdet_k,
            Metric::Alignment => r.alignment,
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::TestAccuracy | Metric::Alignment)
    }
}

/// `θ - η g`.
pub fn sgd_update(params: &ParamVector, grad: &ParamVector, eta: f64) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient length",
            expected: params.len(),
            found: grad.len(),
        });
    }
    let v = params
        .values()
        .iter()
        .zip(grad.values())
        .map(|(t, g)| t - eta * g)
        .collect();
    params.with_values(v)
}

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub graph: Graph,
    pub params: ParamVector,
    pub config: TrainConfig,
    /// Number of completed optimisation steps.
    pub step: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub penalty: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig, input_shape: &[usize], num_outputs: usize) -> Result<Self> {
        let mut arch = config.arch.clone();
        arch.dropout_rate = config.regulariser.dropout_rate();
        let graph = build(&arch, input_shape, num_outputs)?;
        let params = init(
            &graph,
            InitSpec {
                seed: derive_seed(config.seed, STREAM_INIT),
            },
        )?;
        Ok(Self::from_parts(config, graph, params))
    }

    pub fn from_parts(config: TrainConfig, graph: Graph, params: ParamVector) -> Self {
        Self {
            graph,
            params,
            config,
            step: 0,
            epoch: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate_at(self.epoch)
    }

    /// Forward context of the next step for a batch with the given sample
    /// keys (dataset indices).
    pub fn step_context(&self, sample_keys: &[usize]) -> ForwardContext {
        step_context(&self.config, self.step + 1, sample_keys)
    }

    /// One update `θ ← θ - η_t (∇L + ∇g)` on `batch`.
    pub fn sgd_step(&mut self, batch: &Tensor, targets: &Targets, sample_keys: &[usize]) -> Result<StepReport> {
        let next = self.step + 1;
        let ctx = self.step_context(sample_keys);
        let abort = |e: Error| -> Error {
            if e.is_numerical() {
                Error::NumericalAbort {
                    step: next,
                    detail: e.to_string(),
                }
            } else {
                e
            }
        };
        let g = regularised_loss_and_grad(
            &self.graph,
            &self.params,
            batch,
            targets,
            self.config.loss,
            &self.config.regulariser,
            &ctx,
        )
        .map_err(abort)?;
        let updated = sgd_update(&self.params, &g.gradient, self.learning_rate())?;
        if !updated.all_finite() {
            return Err(Error::NumericalAbort {
                step: next,
                detail: format!(
                    "non-finite parameters after update (loss {}, penalty {})",
                    g.loss, g.penalty
                ),
            });
        }
        self.params = updated;
        self.step = next;
        Ok(StepReport {
            loss: g.loss,
            penalty: g.penalty,
        })
    }
}

/// Dropout context of `step` (1-based) for samples with the given indices.
pub fn step_context(config: &TrainConfig, step: usize, sample_keys: &[usize]) -> ForwardContext {
    ForwardContext::train(derive_seed(config.seed, STREAM_DROPOUT), step as u64)
        .with_sample_keys(sample_keys.iter().map(|&k| k as u64).collect())
}

/// Sample order of `epoch` (0-based).
pub fn epoch_order(config: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE + epoch as u64));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Sample indices of every step (1-based step `s` is entry `s - 1`).
pub fn batch_plan(config: &TrainConfig, n: usize) -> Vec<Vec<usize>> {
    let mut plan = Vec::with_capacity(config.total_steps(n));
    for epoch in 0..config.epochs {
        let order = epoch_order(config, n, epoch);
        plan.extend(order.chunks(config.batch_size).map(<[usize]>::to_vec));
    }
    plan
}

/// Mean loss and (for class targets) accuracy in percent over a dataset, in
/// evaluation mode.
pub fn evaluate(graph: &Graph, params: &ParamVector, data: &Dataset, loss: LossKind) -> Result<(f64, Option<f64>)> {
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let mut total = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = data.inputs.select_rows(chunk);
        let t = data.targets.select(chunk);
        let out = graph.forward(params, &x, &ForwardContext::eval())?;
        let mut tape = crate::autodiff::Tape::new();
        let o = tape.leaf(out.to_matrix());
        let l = record_loss(&mut tape, o, &t, loss)?;
        total += tape.scalar(l) * chunk.len() as f64;
        if let Some(labels) = t.labels() {
            correct += argmax_rows(&out).iter().zip(labels).filter(|(a, b)| a == b).count();
        }
    }
    let acc = data.labels().map(|_| 100.0 * correct as f64 / n as f64);
    Ok((total / n as f64, acc))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: TrainState,
    pub trace: MetricTrace,
    /// Sample indices of the final step's batch.
    pub last_batch: Vec<usize>,
}

/// Kernel metrics `(tr K, log det K, alignment)` of one batch.
pub fn kernel_metrics(
    graph: &Graph,
    params: &ParamVector,
    batch: &Tensor,
    labels: Option<&[usize]>,
    ctx: &ForwardContext,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let k = batch_kernel(graph, params, batch, ctx)?;
    let tr = trace_metric(&k);
    let ld = logdet_metric(&k, DEFAULT_RANK_TOL)?;
    let al = match labels {
        Some(l) => alignment(&k, l)?,
        None => None,
    };
    Ok((tr, ld, al))
}

/// Trains from the configured initialisation, recording metrics on the
/// evenly spaced schedule.
pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainRun> {
    let n = train_set.len();
    config.validate(n)?;
    let q = train_set.output_dim();
    if test_set.input_shape() != train_set.input_shape() {
        return Err(Error::invalid(format!(
            "test inputs {:?} do not match training inputs {:?}",
            test_set.input_shape(),
            train_set.input_shape()
        )));
    }
    let mut state = TrainState::new(config.clone(), train_set.input_shape(), q)?;
    let plan = batch_plan(config, n);
    let per_epoch = config.steps_per_epoch(n);
    let schedule = metric_schedule(plan.len(), config.metric_samples);
    let mut next_sample = 0;
    let mut trace = MetricTrace::default();
    let started = Instant::now();
    for (s, idx) in plan.iter().enumerate() {
        state.epoch = s / per_epoch;
        let x = train_set.inputs.select_rows(idx);
        let t = train_set.targets.select(idx);
        state.sgd_step(&x, &t, idx).map_err(|e| with_last_metrics(e, &trace))?;
        if schedule.get(next_sample) != Some(&state.step) {
            continue;
        }
        next_sample += 1;
        let (kx, klabels, kctx) = match config.metric_batch {
            MetricBatch::Current => (x, t.labels().map(<[usize]>::to_vec), state_ctx(&state, idx)),
            MetricBatch::Probe { size } => {
                let p: Vec<usize> = (0..size).collect();
                let pt = train_set.targets.select(&p);
                (
                    train_set.inputs.select_rows(&p),
                    pt.labels().map(<[usize]>::to_vec),
                    ForwardContext::eval(),
                )
            }
        };
        let (tr_k, logdet_k, al) = kernel_metrics(&state.graph, &state.params, &kx, klabels.as_deref(), &kctx)
            .map_err(|e| abort_at(e, state.step))
            .map_err(|e| with_last_metrics(e, &trace))?;
        let (train_loss, _) = evaluate(&state.graph, &state.params, train_set, config.loss)?;
        let (test_loss, test_accuracy) = evaluate(&state.graph, &state.params, test_set, config.loss)?;
        trace.rows.push(MetricRow {
            step: state.step,
            epoch: state.epoch,
            train_loss,
            test_loss,
            test_accuracy,
            tr_k,
            logdet_k,
            alignment: al,
        });
        trace.wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
    }
    Ok(TrainRun {
        state,
        trace,
        last_batch: plan.last().cloned().unwrap_or_default(),
    })
}

fn state_ctx(state: &TrainState, idx: &[usize]) -> ForwardContext {
    step_context(&state.config, state.step, idx)
}

fn abort_at(e: Error, step: usize) -> Error {
    if e.is_numerical() && !matches!(e, Error::NumericalAbort { .. }) {
        Error::NumericalAbort {
            step,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

fn with_last_metrics(e: Error, trace: &MetricTrace) -> Error {
    match (e, trace.rows.last()) {
        (Error::NumericalAbort { step, detail }, Some(r)) => Error::NumericalAbort {
            step,
            detail: format!(
                "{detail}; last metrics at step {}: train_loss {}, test_loss {}, tr_K {}",
                r.step, r.train_loss, r.test_loss, r.tr_k
            ),
        },
        (e, _) => e,
    }
}

/// Builds the train and test sets of run `run` of a scenario.
pub trait DataProvider: Sync {
    fn datasets(&self, train_size: usize, noise_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)>;
}

impl<F> DataProvider for F
where
    F: Fn(usize, f64, u64) -> Result<(Dataset, Dataset)> + Sync,
{
    fn datasets(&self, train_size: usize, noise_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        self(train_size, noise_fraction, seed)
    }
}

/// Seed of run `run` derived from a base seed.
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub alpha: f64,
    /// Mean final test loss over runs; infinite if any run diverged.
    pub score: f64,
    pub run_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best: Option<RegulariserConfig>,
    pub points: Vec<GridPoint>,
}

impl GridSearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,score,run_scores\n");
        for p in &self.points {
            let runs: Vec<String> = p.run_scores.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{},{},{}", p.alpha, p.score, runs.join(";"));
        }
        s
    }
}

/// Picks the `alpha` with the lowest mean final test loss over `runs`
/// resampled runs. Divergent runs score `+∞`; ties keep the earlier value.
/// `best` is `None` when every candidate diverged.
pub fn grid_search(
    template: &TrainConfig,
    grid: &[f64],
    runs: usize,
    train_size: usize,
    noise_fraction: f64,
    data: &dyn DataProvider,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::invalid("grid search needs at least one value"));
    }
    if runs == 0 {
        return Err(Error::invalid("grid search needs at least one run"));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..runs).map(move |r| (g, r))).collect();
    let scores: Vec<f64> = jobs
        .par_iter()
        .map(|&(g, r)| {
            let mut cfg = template.clone();
            cfg.seed = run_seed(template.seed, r);
            let mut attempt = || -> Result<f64> {
                cfg.regulariser = RegulariserConfig::new(template.regulariser.kind, grid[g])?;
                let (tr, te) = data.datasets(train_size, noise_fraction, cfg.seed)?;
                let run = train(&cfg, &tr, &te)?;
                Ok(run.trace.final_value(Metric::TestLoss).unwrap_or(f64::INFINITY))
            };
            match attempt() {
                Ok(v) if v.is_finite() => v,
                _ => f64::INFINITY,
            }
        })
        .collect();
    let points: Vec<GridPoint> = grid
        .iter()
        .enumerate()
        .map(|(g, &alpha)| {
            let run_scores = scores[g * runs..(g + 1) * runs].to_vec();
            let score = run_scores.iter().sum::<f64>() / runs as f64;
            GridPoint {
                alpha,
                score,
                run_scores,
            }
        })
        .collect();
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if p.score < points[best].score {
            best = i;
        }
    }
    let best = points[best].score.is_finite().then_some(RegulariserConfig {
        kind: template.regulariser.kind,
        alpha: grid[best],
    });
    Ok(GridSearchResult { best, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub train_size: usize,
    pub noise_fraction: f64,
    pub regulariser: RegulariserConfig,
}

/// Aggregate of several runs of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub metric: Metric,
    /// Mean over runs of each run's final value.
    pub final_mean: f64,
    /// Sample standard deviation of the per-run final values (0 for one run).
    pub final_std: f64,
    /// Extremum of the across-run average curve.
    pub best: f64,
    pub traces: Vec<MetricTrace>,
    pub failures: Vec<String>,
}

impl ScenarioResult {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `(final mean, final std, best of the averaged curve)` over traces.
pub fn aggregate(traces: &[MetricTrace], metric: Metric) -> (f64, f64, f64) {
    let finals: Vec<f64> = traces.iter().filter_map(|t| t.final_value(metric)).collect();
    let (mean, std) = mean_std(&finals);
    let len = traces.iter().map(MetricTrace::len).min().unwrap_or(0);
    let mut best = f64::NAN;
    for i in 0..len {
        let vals: Vec<f64> = traces.iter().filter_map(|t| metric.get(&t.rows[i])).collect();
        if vals.len() != traces.len() {
            continue;
        }
        let avg = vals.iter().sum::<f64>() / vals.len() as f64;
        let better = if metric.higher_is_better() {
            avg > best
        } else {
            avg < best
        };
        if best.is_nan() || better {
            best = avg;
        }
    }
    (mean, std, best)
}

/// Runs every scenario `runs` times with run seeds `base.seed + r`. Failed
/// runs are recorded and leave the scenario incomplete.
pub fn run_testbench(
    base: &TrainConfig,
    scenarios: &[Scenario],
    runs: usize,
    metric: Metric,
    data: &dyn DataProvider,
) -> Vec<ScenarioResult> {
    let jobs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|s| (0..runs).map(move |r| (s, r)))
        .collect();
    let outcomes: Vec<Result<MetricTrace>> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let sc = &scenarios[s];
            let mut cfg = base.clone();
            cfg.seed = run_seed(base.seed, r);
            cfg.regulariser = sc.regulariser;
            let (tr, te) = data.datasets(sc.train_size, sc.noise_fraction, cfg.seed)?;
            Ok(train(&cfg, &tr, &te)?.trace)
        })
        .collect();
    let mut results = Vec::with_capacity(scenarios.len());
    let mut it = outcomes.into_iter();
    for sc in scenarios {
        let mut traces = Vec::new();
        let mut failures = Vec::new();
        for r in 0..runs {
            match it.next().expect("one outcome per job") {
                Ok(t) => traces.push(t),
                Err(e) => failures.push(format!("run {r}: {e}")),
            }
        }
        let (final_mean, final_std, best) = aggregate(&traces, metric);
        results.push(ScenarioResult {
            scenario: sc.clone(),
            metric,
            final_mean,
            final_std,
            best,
            traces,
            failures,
        });
    }
    results
}

/// Table-style CSV of testbench results.
pub fn results_csv(results: &[ScenarioResult]) -> String {
    let mut s = String::from(
        "scenario,train_size,noise_fraction,regulariser,alpha,metric,runs,failed,final_mean,final_std,best\n",
    );
    for r in results {
        let metric = serde_json::to_value(r.metric)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.scenario.id,
            r.scenario.train_size,
            r.scenario.noise_fraction,
            r.scenario.regulariser.kind,
            r.scenario.regulariser.alpha,
            metric,
            r.traces.len() + r.failures.len(),
            r.failures.len(),
            r.final_mean,
            r.final_std,
            r.best
        );
    }
    s
}

/// Linear-interpolation quantile of unsorted data (`q` in `[0, 1]`).
pub fn quantile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut v = data.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    TrainSize,
    LabelNoise,
    BatchSize,
    LearningRate,
    Epochs,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::TrainSize => "train-size",
            SweepAxis::LabelNoise => "label-noise",
            SweepAxis::BatchSize => "batch-size",
            SweepAxis::LearningRate => "lr",
            SweepAxis::Epochs => "epochs",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::TrainSize,
            SweepAxis::LabelNoise,
            SweepAxis::BatchSize,
            SweepAxis::LearningRate,
            SweepAxis::Epochs,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| Error::invalid(format!("unknown sweep axis `{s}`")))
    }
}

/// Base point of a robustness sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepBase {
    pub config: TrainConfig,
    pub train_size: usize,
    pub noise_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `None` for the base run when no axis is swept.
    pub axis: Option<SweepAxis>,
    pub method: RegulariserConfig,
    /// Per-run final values, over all axis values in order.
    pub finals: Vec<f64>,
    pub failures: usize,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

fn apply_axis(base: &SweepBase, axis: SweepAxis, value: f64) -> Result<SweepBase> {
    let mut b = base.clone();
    let as_count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::invalid(format!(
                "{} needs a positive integer, got {v}",
                axis.as_str()
            )))
        }
    };
    match axis {
        SweepAxis::TrainSize => b.train_size = as_count(value)?,
        SweepAxis::LabelNoise => b.noise_fraction = value,
        SweepAxis::BatchSize => b.config.batch_size = as_count(value)?,
        SweepAxis::LearningRate => b.config.learning_rate = value,
        SweepAxis::Epochs => b.config.epochs = as_count(value)?,
    }
    Ok(b)
}

/// Varies each axis independently around `base` for every method and
/// summarises the final metric by its 10/50/90 % quantiles.
pub fn robustness_sweep(
    base: &SweepBase,
    axes: &[(SweepAxis, Vec<f64>)],
    methods: &[RegulariserConfig],
    runs: usize,
    metric: Metric,
    data: &dyn DataProvider,
) -> Result<Vec<SweepRow>> {
    let mut points: Vec<(Option<SweepAxis>, usize, SweepBase)> = Vec::new();
    for (m, method) in methods.iter().enumerate() {
        let mut b = base.clone();
        b.config.regulariser = *method;
        if axes.is_empty() {
            points.push((None, m, b));
            continue;
        }
        for (axis, values) in axes {
            for &v in values {
                points.push((Some(*axis), m, apply_axis(&b, *axis, v)?));
            }
        }
    }
    let jobs: Vec<(usize, usize)> = (0..points.len()).flat_map(|p| (0..runs).map(move |r| (p, r))).collect();
    let finals: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|&(p, r)| {
            let b = &points[p].2;
            let mut cfg = b.config.clone();
            cfg.seed = run_seed(b.config.seed, r);
            let (tr, te) = data.datasets(b.train_size, b.noise_fraction, cfg.seed).ok()?;
            train(&cfg, &tr, &te).ok()?.trace.final_value(metric)
        })
        .collect();
    let mut rows: Vec<SweepRow> = Vec::new();
    for (j, &(p, _)) in jobs.iter().enumerate() {
        let (axis, m, _) = &points[p];
        let idx = match rows.iter().position(|r| r.axis == *axis && r.method == methods[*m]) {
            Some(i) => i,
            None => {
                rows.push(SweepRow {
                    axis: *axis,
                    method: methods[*m],
                    finals: Vec::new(),
                    failures: 0,
                    q10: f64::NAN,
                    q50: f64::NAN,
                    q90: f64::NAN,
                });
                rows.len() - 1
            }
        };
        match finals[j] {
            Some(v) => rows[idx].finals.push(v),
            None => rows[idx].failures += 1,
        }
    }
    for r in &mut rows {
        r.q10 = quantile(&r.finals, 0.1);
        r.q50 = quantile(&r.finals, 0.5);
        r.q90 = quantile(&r.finals, 0.9);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,regulariser,alpha,runs,failed,q10,q50,q90\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.axis.map_or("base", SweepAxis::as_str),
            r.method.kind,
            r.method.alpha,
            r.finals.len() + r.failures,
            r.failures,
            r.q10,
            r.q50,
            r.q90
        );
    }
    s
}
