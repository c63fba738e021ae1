use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Args;
use mgslab::{
    alignment, argmax_rows, batch_kernel, grid_search, logdet_metric, results_csv, robustness_sweep, run_testbench,
    spectrum, step_context, sweep_csv, trace_metric, Container, Corruption, Dataset, ForwardContext, Graph, Metric,
    ParamSlot, ParamVector, RegulariserConfig, RegulariserKind, Scenario, SweepAxis, SweepBase, Targets, Tensor,
    TrainRun, TrainState, DEFAULT_RANK_TOL,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{self, parse_regulariser, DatasetKind, Preset, RunArgs, RunSpec, Sources};
use crate::CliError;

const LATTICE: usize = 201;

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Repeat the run recorded in a manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',')]
    pub train_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub noise_levels: Vec<f64>,
    /// Regularisers as `kind` or `kind:alpha`.
    #[arg(long, value_delimiter = ',')]
    pub regularisers: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `axis=v1,v2,...` with axis one of train-size, label-noise,
    /// batch-size, lr, epochs. Repeatable.
    #[arg(long = "axis")]
    pub axes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub regularisers: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    /// checkpoint.bin written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset indices of the batch; defaults to the checkpoint's last batch.
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    /// Evaluate without dropout.
    #[arg(long)]
    pub eval: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Candidate strengths.
    #[arg(long, value_delimiter = ',', required_unless_present = "manifest")]
    pub grid: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Record the winner in this `key = value` file.
    #[arg(long)]
    pub write_defaults: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub train: Vec<Corruption>,
    pub test: Vec<Corruption>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub run: RunSpec,
    pub sources: Sources,
    #[serde(default)]
    pub extra: Value,
    pub provenance: Option<Provenance>,
    pub outputs: Vec<String>,
    pub status: String,
    pub error: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl Manifest {
    fn new(command: &str, run: RunSpec, sources: Sources) -> Self {
        Self {
            tool: "mgslab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            run,
            sources,
            extra: Value::Null,
            provenance: None,
            outputs: Vec::new(),
            status: "running".into(),
            error: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    fn load(path: &Path, commands: &[&str]) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if !commands.contains(&m.command.as_str()) {
            return Err(CliError::Config(format!(
                "manifest is for `{}`, not `{}`",
                m.command,
                commands.join("` or `")
            )));
        }
        Ok(m)
    }

    fn finish(&mut self, out: &Path, result: &Result<(), CliError>) -> Result<(), CliError> {
        self.finished_unix_ms = now_ms();
        match result {
            Ok(()) => self.status = "ok".into(),
            Err(e) => {
                self.status = "aborted".into();
                self.error = Some(e.to_string());
            }
        }
        self.outputs.push("manifest.json".into());
        fs::write(out.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn write_output(m: &mut Manifest, out: &Path, name: &str, contents: &[u8]) -> Result<(), CliError> {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    m.outputs.push(name.to_string());
    Ok(())
}

/// Resolves the run from flags or, with `--manifest`, from a recorded run.
fn start(
    run: &RunArgs,
    manifest: Option<&Path>,
    preset: Preset,
    command: &str,
    accepted: &[&str],
) -> Result<(Manifest, Option<Manifest>), CliError> {
    match manifest {
        Some(path) => {
            if !run.to_key_values().is_empty() || run.config.is_some() {
                return Err(CliError::Config("--manifest cannot be combined with run flags".into()));
            }
            let old = Manifest::load(path, accepted)?;
            let m = Manifest::new(command, old.run.clone(), old.sources.clone());
            Ok((m, Some(old)))
        }
        None => {
            let (spec, sources) = config::resolve(run, preset)?;
            Ok((Manifest::new(command, spec, sources), None))
        }
    }
}

fn finish_with(mut m: Manifest, out: &Path, result: Result<(), CliError>) -> Result<(), CliError> {
    m.finish(out, &result)?;
    result
}

pub fn train(args: TrainArgs, two_circles: bool) -> Result<(), CliError> {
    let preset = if two_circles {
        Preset {
            dataset: Some(DatasetKind::TwoCircles),
            label_noise: Some(0.2),
        }
    } else {
        Preset::default()
    };
    let command = if two_circles { "two-circles" } else { "train" };
    let (mut m, _) = start(&args.run, args.manifest.as_deref(), preset, command, &[command])?;
    fs::create_dir_all(&args.out)?;
    let result = run_training(&mut m, &args.out, two_circles);
    finish_with(m, &args.out, result)
}

fn run_training(m: &mut Manifest, out: &Path, boundary: bool) -> Result<(), CliError> {
    let spec = m.run.clone();
    let (tr, te) = spec.dataset.load(spec.train_size, spec.label_noise, spec.train.seed)?;
    m.provenance = Some(Provenance {
        train: tr.provenance.clone(),
        test: te.provenance.clone(),
    });
    m.extra = json!({
        "metric_rows": spec.train.effective_metric_samples(spec.train_size),
        "total_steps": spec.train.total_steps(spec.train_size),
    });
    let run = mgslab::train(&spec.train, &tr, &te)?;
    write_output(m, out, "metrics.csv", run.trace.to_csv().as_bytes())?;
    write_output(m, out, "timing.csv", run.trace.timing_csv().as_bytes())?;
    checkpoint(&spec, &run).save(&out.join("checkpoint.bin"))?;
    m.outputs.push("checkpoint.bin".into());
    if boundary {
        let csv = boundary_csv(&run.state.graph, &run.state.params, &tr)?;
        write_output(m, out, "boundary.csv", csv.as_bytes())?;
    }
    let last = run.trace.rows.last();
    println!(
        "{} steps, final test loss {}, final tr_K {}",
        run.state.step,
        last.map_or(f64::NAN, |r| r.test_loss),
        last.map_or(f64::NAN, |r| r.tr_k)
    );
    Ok(())
}

fn checkpoint(spec: &RunSpec, run: &TrainRun) -> Container {
    let p = &run.state.params;
    let batch: Vec<f64> = run.last_batch.iter().map(|&i| i as f64).collect();
    Container {
        arrays: vec![
            (
                "params".into(),
                Tensor::new(vec![p.len()], p.values().to_vec()).expect("flat params"),
            ),
            (
                "batch".into(),
                Tensor::new(vec![batch.len()], batch).expect("flat indices"),
            ),
        ],
        metadata: json!({
            "format": "mgslab-checkpoint",
            "run": spec,
            "layout": p.layout(),
            "step": run.state.step,
            "epoch": run.state.epoch,
        }),
    }
}

/// Predicted class on a `LATTICE x LATTICE` grid over the inputs' bounding
/// box, as `x,y,class` rows with `x` varying fastest.
fn boundary_csv(graph: &Graph, params: &ParamVector, data: &Dataset) -> Result<String, CliError> {
    if data.input_shape() != [2] {
        return Err(CliError::Config("decision boundaries need 2-D inputs".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for i in 0..data.len() {
        for (d, &v) in data.inputs.row(i).iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    let axis = |d: usize, k: usize| lo[d] + (hi[d] - lo[d]) * k as f64 / (LATTICE - 1) as f64;
    let mut points = Vec::with_capacity(2 * LATTICE * LATTICE);
    for j in 0..LATTICE {
        for i in 0..LATTICE {
            points.push(axis(0, i));
            points.push(axis(1, j));
        }
    }
    let grid = Tensor::new(vec![LATTICE * LATTICE, 2], points)?;
    let out = graph.forward(params, &grid, &ForwardContext::eval())?;
    let classes = argmax_rows(&out);
    let mut s = String::from("x,y,class\n");
    for (r, c) in classes.iter().enumerate() {
        let p = grid.row(r);
        let _ = writeln!(s, "{},{},{c}", p[0], p[1]);
    }
    Ok(s)
}

pub fn inspect(args: InspectArgs) -> Result<(), CliError> {
    let c = Container::load(&args.checkpoint)?;
    let bad = |what: &str| CliError::Config(format!("{} is not a checkpoint: {what}", args.checkpoint.display()));
    if c.metadata["format"] != "mgslab-checkpoint" {
        return Err(bad("wrong format tag"));
    }
    let spec: RunSpec = serde_json::from_value(c.metadata["run"].clone())?;
    let layout: Vec<ParamSlot> = serde_json::from_value(c.metadata["layout"].clone())?;
    let step = c.metadata["step"].as_u64().ok_or_else(|| bad("missing step"))? as usize;
    let values = c.get("params").ok_or_else(|| bad("missing params"))?.data().to_vec();
    let params = ParamVector::new(values, layout)?;
    let stored: Vec<usize> = c
        .get("batch")
        .ok_or_else(|| bad("missing batch"))?
        .data()
        .iter()
        .map(|&v| v as usize)
        .collect();

    let (tr, _) = spec.dataset.load(spec.train_size, spec.label_noise, spec.train.seed)?;
    let state = TrainState::new(spec.train.clone(), tr.input_shape(), tr.output_dim())?;
    if state.graph.layout() != params.layout() {
        return Err(bad("parameter layout does not match the recorded architecture"));
    }
    let idx = args.indices.clone().unwrap_or(stored);
    if let Some(&i) = idx.iter().find(|&&i| i >= tr.len()) {
        return Err(CliError::Config(format!(
            "index {i} out of range for {} training points",
            tr.len()
        )));
    }
    let x = tr.inputs.select_rows(&idx);
    let ctx = if args.eval {
        ForwardContext::eval()
    } else {
        step_context(&spec.train, step, &idx)
    };
    let k = batch_kernel(&state.graph, &params, &x, &ctx)?;
    let tr_k = trace_metric(&k);
    let logdet = logdet_metric(&k, DEFAULT_RANK_TOL)?;
    let al = match tr.targets.select(&idx) {
        Targets::Classes { labels, .. } => alignment(&k, &labels)?,
        Targets::Values(_) => None,
    };
    let eig = spectrum(&k)?;

    let mut m = Manifest::new("inspect", spec, Sources::default());
    m.extra = json!({ "checkpoint": args.checkpoint, "step": step, "batch": idx, "eval": args.eval });
    fs::create_dir_all(&args.out)?;
    let mut kernel = String::new();
    for row in k.matrix().rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        kernel.push_str(&cells.join(","));
        kernel.push('\n');
    }
    write_output(&mut m, &args.out, "kernel.csv", kernel.as_bytes())?;
    let mut spec_csv = String::from("index,eigenvalue\n");
    for (i, v) in eig.iter().enumerate() {
        let _ = writeln!(spec_csv, "{i},{v}");
    }
    write_output(&mut m, &args.out, "spectrum.csv", spec_csv.as_bytes())?;
    let summary = json!({ "step": step, "tr_K": tr_k, "logdet_K": logdet, "alignment": al });
    write_output(
        &mut m,
        &args.out,
        "summary.json",
        (serde_json::to_string_pretty(&summary)? + "\n").as_bytes(),
    )?;
    println!(
        "step {step}: tr_K {tr_k}, logdet_K {}",
        logdet.map_or("missing".to_string(), |v| v.to_string())
    );
    finish_with(m, &args.out, Ok(()))
}

fn metric_for(spec: &RunSpec) -> Metric {
    match config::dataset_kind(spec) {
        DatasetKind::Regression => Metric::TestLoss,
        _ => Metric::TestAccuracy,
    }
}

/// Parses `kind` or `kind:alpha`; a missing alpha uses the tuned value.
fn parse_method(s: &str, spec: &RunSpec) -> Result<RegulariserConfig, CliError> {
    let (kind, alpha) = match s.split_once(':') {
        Some((k, a)) => (
            k,
            Some(
                a.parse::<f64>()
                    .map_err(|_| CliError::Config(format!("invalid alpha in `{s}`")))?,
            ),
        ),
        None => (s, None),
    };
    let kind = parse_regulariser(kind).map_err(CliError::Config)?;
    let alpha = alpha.unwrap_or_else(|| config::alpha_for(config::dataset_kind(spec), kind));
    RegulariserConfig::new(kind, alpha).map_err(|e| CliError::Config(e.to_string()))
}

fn methods(list: &[String], spec: &RunSpec) -> Result<Vec<RegulariserConfig>, CliError> {
    if list.is_empty() {
        return Ok(vec![spec.train.regulariser]);
    }
    list.iter().map(|s| parse_method(s, spec)).collect()
}

pub fn bench(args: BenchArgs) -> Result<(), CliError> {
    let (mut m, old) = start(
        &args.run,
        args.manifest.as_deref(),
        Preset::default(),
        "bench",
        &["bench"],
    )?;
    let (scenarios, runs): (Vec<Scenario>, usize) = match &old {
        Some(o) => (
            serde_json::from_value(o.extra["scenarios"].clone())?,
            o.extra["runs"]
                .as_u64()
                .ok_or_else(|| CliError::Config("manifest lacks runs".into()))? as usize,
        ),
        None => {
            let spec = &m.run;
            let sizes = if args.train_sizes.is_empty() {
                vec![spec.train_size]
            } else {
                args.train_sizes.clone()
            };
            let noises = if args.noise_levels.is_empty() {
                vec![spec.label_noise]
            } else {
                args.noise_levels.clone()
            };
            let mut sc = Vec::new();
            for &n in &sizes {
                for &noise in &noises {
                    for method in methods(&args.regularisers, spec)? {
                        sc.push(Scenario {
                            id: format!("n{n}-noise{noise}-{}-{}", method.kind, method.alpha),
                            train_size: n,
                            noise_fraction: noise,
                            regulariser: method,
                        });
                    }
                }
            }
            (sc, args.runs)
        }
    };
    if runs == 0 {
        return Err(CliError::Config("--runs must be at least 1".into()));
    }
    for sc in &scenarios {
        let mut cfg = m.run.train.clone();
        cfg.regulariser = sc.regulariser;
        cfg.validate(sc.train_size)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    m.extra = json!({ "scenarios": scenarios, "runs": runs });
    fs::create_dir_all(&args.out)?;
    let metric = metric_for(&m.run);
    let results = run_testbench(&m.run.train, &scenarios, runs, metric, &m.run.dataset);
    let mut result = write_output(&mut m, &args.out, "results.csv", results_csv(&results).as_bytes());
    for r in &results {
        for (i, t) in r.traces.iter().enumerate() {
            if result.is_ok() {
                result = write_output(
                    &mut m,
                    &args.out,
                    &format!("runs/{}/run{i}.csv", r.scenario.id),
                    t.to_csv().as_bytes(),
                );
            }
        }
        for f in &r.failures {
            eprintln!("warning: scenario {} incomplete: {f}", r.scenario.id);
        }
        println!(
            "{}: final {} ± {} (best {})",
            r.scenario.id, r.final_mean, r.final_std, r.best
        );
    }
    finish_with(m, &args.out, result)
}

fn parse_axis(s: &str) -> Result<(SweepAxis, Vec<f64>), CliError> {
    let (name, values) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("axis `{s}` must look like name=v1,v2")))?;
    let axis: SweepAxis = name
        .trim()
        .parse()
        .map_err(|e: mgslab::Error| CliError::Config(e.to_string()))?;
    let values = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad axis value `{v}`")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((axis, values))
}

pub fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let (mut m, old) = start(
        &args.run,
        args.manifest.as_deref(),
        Preset::default(),
        "sweep",
        &["sweep"],
    )?;
    type Plan = (Vec<(SweepAxis, Vec<f64>)>, Vec<RegulariserConfig>, usize);
    let (axes, meths, runs): Plan = match &old {
        Some(o) => (
            serde_json::from_value(o.extra["axes"].clone())?,
            serde_json::from_value(o.extra["methods"].clone())?,
            o.extra["runs"]
                .as_u64()
                .ok_or_else(|| CliError::Config("manifest lacks runs".into()))? as usize,
        ),
        None => (
            args.axes.iter().map(|a| parse_axis(a)).collect::<Result<_, _>>()?,
            methods(&args.regularisers, &m.run)?,
            args.runs,
        ),
    };
    if runs == 0 {
        return Err(CliError::Config("--runs must be at least 1".into()));
    }
    m.extra = json!({ "axes": axes, "methods": meths, "runs": runs });
    fs::create_dir_all(&args.out)?;
    let base = SweepBase {
        config: m.run.train.clone(),
        train_size: m.run.train_size,
        noise_fraction: m.run.label_noise,
    };
    let result = robustness_sweep(&base, &axes, &meths, runs, metric_for(&m.run), &m.run.dataset)
        .map_err(CliError::from)
        .and_then(|rows| write_output(&mut m, &args.out, "sweep.csv", sweep_csv(&rows).as_bytes()));
    finish_with(m, &args.out, result)
}

pub fn tune(args: TuneArgs) -> Result<(), CliError> {
    let (mut m, old) = start(
        &args.run,
        args.manifest.as_deref(),
        Preset::default(),
        "tune",
        &["tune"],
    )?;
    let (grid, runs): (Vec<f64>, usize) = match &old {
        Some(o) => (
            serde_json::from_value(o.extra["grid"].clone())?,
            o.extra["runs"]
                .as_u64()
                .ok_or_else(|| CliError::Config("manifest lacks runs".into()))? as usize,
        ),
        None => (args.grid.clone(), args.runs),
    };
    if m.run.train.regulariser.kind == RegulariserKind::None {
        return Err(CliError::Config("tune needs --regulariser".into()));
    }
    if grid.is_empty() || runs == 0 {
        return Err(CliError::Config("tune needs a non-empty --grid and --runs >= 1".into()));
    }
    fs::create_dir_all(&args.out)?;
    let spec = m.run.clone();
    let res = grid_search(
        &spec.train,
        &grid,
        runs,
        spec.train_size,
        spec.label_noise,
        &spec.dataset,
    )?;
    m.extra = json!({ "grid": grid, "runs": runs, "best": res.best, "points": res.points });
    let mut result = write_output(&mut m, &args.out, "grid.csv", res.to_csv().as_bytes());
    match (res.best, &result) {
        (None, Ok(())) => {
            result = Err(CliError::Numerical(format!(
                "every {} candidate diverged; see grid.csv",
                spec.train.regulariser.kind
            )))
        }
        (Some(best), Ok(())) => {
            println!("best alpha for {}: {}", best.kind, best.alpha);
            if let Some(path) = &args.write_defaults {
                let key = format!("{}.{}", config::dataset_kind(&spec).name(), best.kind);
                result = config::write_key_value(path, &key, &best.alpha.to_string());
            }
        }
        _ => {}
    }
    finish_with(m, &args.out, result)
}
