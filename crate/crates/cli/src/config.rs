//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fisformer::evaluation::MetricScale;
use fisformer::membership::MfKind;
use fisformer::training::{Precision, TrainConfig};
use fisformer::transformer::{Interaction, ModelConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DateColumn {
    Auto,
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Interaction,
    MfKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Every setting a command can read. Defaults give the synthetic
/// desk experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Empty means the built-in synthetic sinusoid.
    pub data_path: Option<PathBuf>,
    pub date_column: DateColumn,
    pub dataset: Option<String>,
    pub synth_vars: usize,
    pub synth_length: usize,
    pub synth_seed: u64,
    /// Zero lengths select the 70/10/20 split.
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Stride of training windows; validation and test always use 1.
    pub stride: usize,

    pub d_model: usize,
    pub n_blocks: usize,
    pub n_rules: usize,
    /// Zero means `4 * d_model`.
    pub ffn_hidden: usize,
    pub interaction: Interaction,
    pub mf_kind: MfKind,
    pub share_mf_across_tokens: bool,
    pub epsilon: f64,
    pub dropout: f64,

    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Zero disables clipping.
    pub clip_norm: f64,
    pub precision: Precision,

    pub metric_scale: MetricScale,
    /// Write wall-clock seconds into history.csv; off gives byte-identical reruns.
    pub log_seconds: bool,
    pub ablation: Ablation,
    pub gradcheck_samples: usize,
    pub gradcheck_tolerance: f64,
    pub gradcheck_kinds: Vec<MfKind>,
    pub bench_tokens: Vec<usize>,
    pub bench_d: usize,
    pub bench_repeats: usize,
    pub trace_split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tc = TrainConfig::default();
        Self {
            data_path: None,
            date_column: DateColumn::Auto,
            dataset: None,
            synth_vars: 4,
            synth_length: 2000,
            synth_seed: 7,
            train_len: 0,
            val_len: 0,
            test_len: 0,
            lookback: 96,
            horizon: 24,
            stride: 1,
            d_model: 64,
            n_blocks: 2,
            n_rules: 3,
            ffn_hidden: 0,
            interaction: Interaction::Fis,
            mf_kind: MfKind::Gaussian,
            share_mf_across_tokens: false,
            epsilon: fisformer::fis::DEFAULT_EPSILON,
            dropout: 0.0,
            lr: tc.lr,
            batch_size: tc.batch_size,
            epochs: tc.epochs,
            seed: 7,
            beta1: tc.beta1,
            beta2: tc.beta2,
            adam_eps: tc.adam_eps,
            clip_norm: 0.0,
            precision: tc.precision,
            metric_scale: MetricScale::Normalized,
            log_seconds: true,
            ablation: Ablation::Interaction,
            gradcheck_samples: 200,
            gradcheck_tolerance: 1e-4,
            gradcheck_kinds: MfKind::ALL.to_vec(),
            bench_tokens: vec![64, 256, 1024],
            bench_d: 64,
            bench_repeats: 7,
            trace_split: Split::Test,
        }
    }
}

/// Every key `set` accepts.
pub const KEYS: [&str; 40] = [
    "data_path",
    "date_column",
    "dataset",
    "synth_vars",
    "synth_length",
    "synth_seed",
    "train_len",
    "val_len",
    "test_len",
    "lookback",
    "horizon",
    "stride",
    "d_model",
    "n_blocks",
    "n_rules",
    "ffn_hidden",
    "interaction",
    "mf_kind",
    "share_mf_across_tokens",
    "epsilon",
    "dropout",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "beta1",
    "beta2",
    "adam_eps",
    "clip_norm",
    "precision",
    "metric_scale",
    "log_seconds",
    "ablation",
    "gradcheck_samples",
    "gradcheck_tolerance",
    "gradcheck_kinds",
    "bench_tokens",
    "bench_d",
    "bench_repeats",
    "trace_split",
];

fn parse<T: FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| CliError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(CliError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            message: "expected true or false".into(),
        }),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: fmt::Display,
{
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<CliResult<_>>()?;
    if items.is_empty() {
        return Err(CliError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            message: "empty list".into(),
        });
    }
    Ok(items)
}

fn bad(key: &str, value: &str, message: &str) -> CliError {
    CliError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        message: message.to_string(),
    }
}

fn list_text<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses a whole config file body on top of the defaults.
    pub fn parse_text(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> CliResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::ConfigLine {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                CliError::UnknownKey(_) | CliError::BadValue { .. } => CliError::ConfigLine {
                    line: i + 1,
                    message: e.to_string(),
                },
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given to `--set`.
    pub fn apply_override(&mut self, pair: &str) -> CliResult<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {pair:?}")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        match key {
            "data_path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "date_column" => {
                self.date_column = match value.to_ascii_lowercase().as_str() {
                    "auto" => DateColumn::Auto,
                    _ if parse_bool(key, value)? => DateColumn::Yes,
                    _ => DateColumn::No,
                }
            }
            "dataset" => self.dataset = (!value.is_empty()).then(|| value.to_string()),
            "synth_vars" => self.synth_vars = parse(key, value)?,
            "synth_length" => self.synth_length = parse(key, value)?,
            "synth_seed" => self.synth_seed = parse(key, value)?,
            "train_len" => self.train_len = parse(key, value)?,
            "val_len" => self.val_len = parse(key, value)?,
            "test_len" => self.test_len = parse(key, value)?,
            "lookback" => self.lookback = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "stride" => self.stride = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "n_rules" => self.n_rules = parse(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "interaction" => self.interaction = parse(key, value)?,
            "mf_kind" => self.mf_kind = parse(key, value)?,
            "share_mf_across_tokens" => self.share_mf_across_tokens = parse_bool(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "metric_scale" => {
                self.metric_scale = match value.to_ascii_lowercase().as_str() {
                    "normalized" => MetricScale::Normalized,
                    "denormalized" => MetricScale::Denormalized,
                    _ => return Err(bad(key, value, "expected normalized or denormalized")),
                }
            }
            "log_seconds" => self.log_seconds = parse_bool(key, value)?,
            "ablation" => {
                self.ablation = match value.to_ascii_lowercase().as_str() {
                    "interaction" => Ablation::Interaction,
                    "mf_kind" => Ablation::MfKind,
                    _ => return Err(bad(key, value, "expected interaction or mf_kind")),
                }
            }
            "gradcheck_samples" => self.gradcheck_samples = parse(key, value)?,
            "gradcheck_tolerance" => self.gradcheck_tolerance = parse(key, value)?,
            "gradcheck_kinds" => {
                self.gradcheck_kinds = if value.eq_ignore_ascii_case("all") {
                    MfKind::ALL.to_vec()
                } else {
                    parse_list(key, value)?
                }
            }
            "bench_tokens" => self.bench_tokens = parse_list(key, value)?,
            "bench_d" => self.bench_d = parse(key, value)?,
            "bench_repeats" => self.bench_repeats = parse(key, value)?,
            "trace_split" => {
                self.trace_split = match value.to_ascii_lowercase().as_str() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    _ => return Err(bad(key, value, "expected train, val or test")),
                }
            }
            "n_variates" | "output_dir" | "threads" => {
                return Err(bad(
                    key,
                    value,
                    "not settable here: n_variates comes from the data, the output directory from --out, threads from FISFORMER_THREADS",
                ))
            }
            _ => return Err(CliError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn dataset_label(&self) -> String {
        if let Some(d) = &self.dataset {
            return d.clone();
        }
        match &self.data_path {
            Some(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "data".into()),
            None => "synthetic".into(),
        }
    }

    pub fn model_config(&self, n_variates: usize) -> fisformer::Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_blocks: self.n_blocks,
            n_rules: self.n_rules,
            interaction: self.interaction,
            mf_kind: self.mf_kind,
            ffn_hidden: if self.ffn_hidden == 0 {
                4 * self.d_model
            } else {
                self.ffn_hidden
            },
            lookback: self.lookback,
            horizon: self.horizon,
            n_variates,
            share_mf_across_tokens: self.share_mf_across_tokens,
            epsilon: self.epsilon,
            dropout: self.dropout,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> fisformer::Result<TrainConfig> {
        let tc = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            precision: self.precision,
        };
        tc.validate()?;
        Ok(tc)
    }
}

impl fmt::Display for RunConfig {
    /// The resolved configuration in the same format `parse_text` reads.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let date = match self.date_column {
            DateColumn::Auto => "auto",
            DateColumn::Yes => "true",
            DateColumn::No => "false",
        };
        let ablation = match self.ablation {
            Ablation::Interaction => "interaction",
            Ablation::MfKind => "mf_kind",
        };
        let split = match self.trace_split {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        };
        let path = self
            .data_path
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let lines: Vec<(&str, String)> = vec![
            ("data_path", path),
            ("date_column", date.into()),
            ("dataset", self.dataset.clone().unwrap_or_default()),
            ("synth_vars", self.synth_vars.to_string()),
            ("synth_length", self.synth_length.to_string()),
            ("synth_seed", self.synth_seed.to_string()),
            ("train_len", self.train_len.to_string()),
            ("val_len", self.val_len.to_string()),
            ("test_len", self.test_len.to_string()),
            ("lookback", self.lookback.to_string()),
            ("horizon", self.horizon.to_string()),
            ("stride", self.stride.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_blocks", self.n_blocks.to_string()),
            ("n_rules", self.n_rules.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("interaction", self.interaction.to_string()),
            ("mf_kind", self.mf_kind.to_string()),
            (
                "share_mf_across_tokens",
                self.share_mf_across_tokens.to_string(),
            ),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("dropout", format!("{:?}", self.dropout)),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("clip_norm", format!("{:?}", self.clip_norm)),
            ("precision", self.precision.to_string()),
            ("metric_scale", self.metric_scale.to_string()),
            ("log_seconds", self.log_seconds.to_string()),
            ("ablation", ablation.into()),
            ("gradcheck_samples", self.gradcheck_samples.to_string()),
            (
                "gradcheck_tolerance",
                format!("{:?}", self.gradcheck_tolerance),
            ),
            ("gradcheck_kinds", list_text(&self.gradcheck_kinds)),
            ("bench_tokens", list_text(&self.bench_tokens)),
            ("bench_d", self.bench_d.to_string()),
            ("bench_repeats", self.bench_repeats.to_string()),
            ("trace_split", split.into()),
        ];
        for (k, v) in lines {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
