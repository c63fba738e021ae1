//! Flat `key = value` config files and resolution of flags into a run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use mgslab::{ArchSpec, DataSource, LossKind, MetricBatch, RegulariserConfig, RegulariserKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Strengths chosen by `mgslab tune`, keyed `<dataset>.<regulariser>`.
const TUNED: &str = include_str!("../tuned.conf");

pub const SEED_ENV: &str = "MGSLAB_SEED";
pub const DATA_DIR_ENV: &str = "MGSLAB_DATA_DIR";

pub type KeyValues = BTreeMap<String, String>;

/// Parses `key = value` lines. `#` starts a comment; keys are
/// case-insensitive and `_` is read as `-`.
pub fn parse_key_values(text: &str, origin: &str) -> Result<KeyValues, CliError> {
    let mut out = KeyValues::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Config(format!("{origin}:{}: expected `key = value`", no + 1)));
        };
        let key = k.trim().to_ascii_lowercase().replace('_', "-");
        if key.is_empty() {
            return Err(CliError::Config(format!("{origin}:{}: empty key", no + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("{origin}:{}: duplicate key `{key}`", no + 1)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoCircles,
    Mnist,
    Regression,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoCircles => "two-circles",
            DatasetKind::Mnist => "mnist",
            DatasetKind::Regression => "regression",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchName {
    Fcn,
    Lenet,
}

pub fn parse_regulariser(s: &str) -> Result<RegulariserKind, String> {
    RegulariserKind::from_str(s).map_err(|e| e.to_string())
}

/// Flags shared by every command that trains models.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchName>,
    #[arg(long)]
    pub hidden_layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// none, weight, dropout, lossgrad-param, lossgrad-input, mgs-trace or mgs-logdet
    #[arg(long, value_parser = parse_regulariser)]
    pub regulariser: Option<RegulariserKind>,
    /// Penalty strength (drop rate for dropout). Defaults to the tuned value.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub train_size: Option<usize>,
    /// Fraction of training labels to flip.
    #[arg(long)]
    pub label_noise: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub metric_samples: Option<usize>,
    /// Compute kernel metrics on the first N training points in evaluation
    /// mode instead of the current batch.
    #[arg(long)]
    pub probe_batch: Option<usize>,
    /// `key = value` file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "dataset",
    "data-dir",
    "arch",
    "hidden-layers",
    "width",
    "regulariser",
    "alpha",
    "train-size",
    "label-noise",
    "epochs",
    "batch-size",
    "lr",
    "lr-decay",
    "seed",
    "metric-samples",
    "probe-batch",
];

impl RunArgs {
    /// The flags that were given, as config entries.
    pub fn to_key_values(&self) -> KeyValues {
        let mut m = KeyValues::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                m.insert(k.to_string(), v);
            }
        };
        put("dataset", self.dataset.map(|d| d.name().to_string()));
        put("data-dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        put(
            "arch",
            self.arch.map(|a| match a {
                ArchName::Fcn => "fcn".to_string(),
                ArchName::Lenet => "lenet".to_string(),
            }),
        );
        put("hidden-layers", self.hidden_layers.map(|v| v.to_string()));
        put("width", self.width.map(|v| v.to_string()));
        put("regulariser", self.regulariser.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("train-size", self.train_size.map(|v| v.to_string()));
        put("label-noise", self.label_noise.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch-size", self.batch_size.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("lr-decay", self.lr_decay.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("metric-samples", self.metric_samples.map(|v| v.to_string()));
        put("probe-batch", self.probe_batch.map(|v| v.to_string()));
        m
    }
}

/// Everything needed to rebuild the data and repeat a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub dataset: DataSource,
    pub train_size: usize,
    pub label_noise: f64,
    pub train: TrainConfig,
}

/// Where each resolved value came from.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Sources {
    pub flags: KeyValues,
    pub config_file: Option<PathBuf>,
    pub config_values: KeyValues,
    pub env_seed: Option<String>,
    pub seed_source: String,
    pub alpha_source: String,
}

/// Per-command defaults that differ from the plain `train` ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct Preset {
    pub dataset: Option<DatasetKind>,
    pub label_noise: Option<f64>,
}

fn value<T: FromStr>(m: &KeyValues, key: &str) -> Result<Option<T>, CliError> {
    m.get(key)
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| CliError::Config(format!("invalid value `{s}` for `{key}`")))
        })
        .transpose()
}

pub fn default_data_dir() -> PathBuf {
    if let Some(d) = std::env::var_os(DATA_DIR_ENV) {
        return PathBuf::from(d);
    }
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    bundled.canonicalize().unwrap_or(bundled)
}

/// Tuned strength for a regulariser on a dataset, if one was recorded.
pub fn tuned_alpha(dataset: DatasetKind, kind: RegulariserKind) -> Option<f64> {
    let table = parse_key_values(TUNED, "tuned.conf").expect("bundled tuned.conf parses");
    table.get(&format!("{}.{}", dataset.name(), kind))?.parse().ok()
}

fn fallback_alpha(kind: RegulariserKind) -> f64 {
    match kind {
        RegulariserKind::None => 0.0,
        RegulariserKind::Dropout => 0.2,
        RegulariserKind::Weight => 1e-4,
        _ => 1e-4,
    }
}

/// Merges config file entries and flags (flags win) into a run.
pub fn resolve(args: &RunArgs, preset: Preset) -> Result<(RunSpec, Sources), CliError> {
    let flags = args.to_key_values();
    let config_values = match &args.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            parse_key_values(&text, &p.display().to_string())?
        }
        None => KeyValues::new(),
    };
    if let Some(bad) = config_values.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(CliError::Config(format!("unknown config key `{bad}`")));
    }
    let mut m = config_values.clone();
    m.extend(flags.clone());

    let dataset = match m.get("dataset").map(String::as_str) {
        None => preset.dataset.unwrap_or(DatasetKind::TwoCircles),
        Some(s) => DatasetKind::from_str(s, true).map_err(|_| CliError::Config(format!("unknown dataset `{s}`")))?,
    };
    if let Some(forced) = preset.dataset {
        if forced != dataset {
            return Err(CliError::Config(format!("this command only runs on {}", forced.name())));
        }
    }
    let (size, layers, width, epochs, loss) = match dataset {
        DatasetKind::TwoCircles => (400, 3, 64, 200, LossKind::SoftmaxCrossEntropy),
        DatasetKind::Mnist => (1000, 2, 128, 50, LossKind::SoftmaxCrossEntropy),
        DatasetKind::Regression => (400, 3, 64, 100, LossKind::MeanSquaredError),
    };
    let source = match dataset {
        DatasetKind::TwoCircles => DataSource::two_circles(),
        DatasetKind::Mnist => {
            let dir = value::<PathBuf>(&m, "data-dir")?.unwrap_or_else(default_data_dir);
            DataSource::mnist(dir.canonicalize().unwrap_or(dir))
        }
        DatasetKind::Regression => DataSource::Regression {
            inputs: 4,
            outputs: 2,
            noise_scale: 0.1,
        },
    };
    let arch = match m.get("arch").map(String::as_str) {
        None | Some("fcn") => ArchSpec::fcn(
            value(&m, "hidden-layers")?.unwrap_or(layers),
            value(&m, "width")?.unwrap_or(width),
        ),
        Some("lenet") => ArchSpec::lenet(),
        Some(other) => return Err(CliError::Config(format!("unknown arch `{other}`"))),
    };
    let kind = match m.get("regulariser") {
        None => RegulariserKind::None,
        Some(s) => parse_regulariser(s).map_err(CliError::Config)?,
    };
    let (alpha, alpha_source) = match value::<f64>(&m, "alpha")? {
        Some(a) if flags.contains_key("alpha") => (a, "flag"),
        Some(a) => (a, "config"),
        None if kind == RegulariserKind::None => (0.0, "none"),
        None => match tuned_alpha(dataset, kind) {
            Some(a) => (a, "tuned"),
            None => (fallback_alpha(kind), "default"),
        },
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let (seed, seed_source) = match value::<u64>(&m, "seed")? {
        Some(s) if flags.contains_key("seed") => (s, "flag"),
        Some(s) => (s, "config"),
        None => match &env_seed {
            Some(s) => (
                s.trim()
                    .parse()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?,
                "env",
            ),
            None => (0, "default"),
        },
    };
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        learning_rate: value(&m, "lr")?.unwrap_or(defaults.learning_rate),
        lr_decay: value(&m, "lr-decay")?.unwrap_or(defaults.lr_decay),
        batch_size: value(&m, "batch-size")?.unwrap_or(defaults.batch_size),
        epochs: value(&m, "epochs")?.unwrap_or(epochs),
        seed,
        metric_samples: value(&m, "metric-samples")?.unwrap_or(defaults.metric_samples),
        regulariser: RegulariserConfig::new(kind, alpha).map_err(|e| CliError::Config(e.to_string()))?,
        arch,
        loss,
        metric_batch: match value::<usize>(&m, "probe-batch")? {
            Some(size) => MetricBatch::Probe { size },
            None => MetricBatch::Current,
        },
    };
    let spec = RunSpec {
        dataset: source,
        train_size: value(&m, "train-size")?.unwrap_or(size),
        label_noise: value(&m, "label-noise")?.or(preset.label_noise).unwrap_or(0.0),
        train,
    };
    if !(0.0..=1.0).contains(&spec.label_noise) {
        return Err(CliError::Config(format!(
            "label-noise must be in [0, 1], got {}",
            spec.label_noise
        )));
    }
    spec.train
        .validate(spec.train_size)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sources = Sources {
        flags,
        config_file: args.config.clone(),
        config_values,
        env_seed,
        seed_source: seed_source.to_string(),
        alpha_source: alpha_source.to_string(),
    };
    Ok((spec, sources))
}

/// Inserts or replaces `key = value` in a config file, keeping other lines.
pub fn write_key_value(path: &Path, key: &str, value: &str) -> Result<(), CliError> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut lines: Vec<String> = Vec::new();
    let mut replaced = false;
    for line in text.lines() {
        let k = line
            .split('#')
            .next()
            .unwrap_or("")
            .split('=')
            .next()
            .unwrap_or("")
            .trim();
        if k == key {
            lines.push(format!("{key} = {value}"));
            replaced = true;
        } else {
            lines.push(line.to_string());
        }
    }
    if !replaced {
        lines.push(format!("{key} = {value}"));
    }
    fs::write(path, lines.join("\n") + "\n")?;
    Ok(())
}

pub fn dataset_kind(spec: &RunSpec) -> DatasetKind {
    match spec.dataset {
        DataSource::TwoCircles { .. } => DatasetKind::TwoCircles,
        DataSource::Mnist { .. } => DatasetKind::Mnist,
        DataSource::Regression { .. } => DatasetKind::Regression,
    }
}

/// Tuned strength, else a generic default.
pub fn alpha_for(dataset: DatasetKind, kind: RegulariserKind) -> f64 {
    tuned_alpha(dataset, kind).unwrap_or_else(|| fallback_alpha(kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_values_parse_with_comments() {
        let m = parse_key_values("# c\nTrain_Size = 64 # n\n\nlr=0.5\n", "t").unwrap();
        assert_eq!(m["train-size"], "64");
        assert_eq!(m["lr"], "0.5");
        assert!(parse_key_values("lr 0.5", "t").is_err());
        assert!(parse_key_values("lr=1\nlr=2", "t").is_err());
    }

    #[test]
    fn bundled_tuning_table_parses() {
        parse_key_values(TUNED, "tuned.conf").unwrap();
    }
}
