//! Command-line front end: `synth`, `train`, `eval`, `predict`, `inspect`.
//!
//! Every command reads an optional flat `key = value` config file; each key
//! can also be given as `--key value`, which takes precedence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};
use serde::Serialize;

use crate::eval::{predict_record, score_predictions, EvalError, DEFAULT_THRESHOLD};
use crate::ingest::{list_record_files, load_dataset_with, parse_series, record_id, DatasetKind, TimeSeriesRecord, MANIFEST_FILE};
use crate::model::{Checkpoint, ModelConfig};
use crate::synth::{generate_dataset, label_runs, read_manifest, SynthConfig, SynthError};
use crate::train::{fold_split, split_records, train_with_split, AdamConfig, TrainError, TrainRunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;
pub const EXIT_COMPAT: i32 = 5;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const METRICS_FILE: &str = "metrics.txt";

/// Every recognised config key with its help text.
pub const KEYS: &[(&str, &str)] = &[
    ("kind", "dataset kind: tdcsfog or defog"),
    ("seed", "random seed"),
    ("threads", "worker threads for evaluation and per-block gradients"),
    // synth
    ("n_records", "number of records to synthesize"),
    ("duration_s", "record length in seconds"),
    ("gait_freq_hz", "normal-walking frequency"),
    ("freeze_band_hz", "freeze band as `low, high`"),
    ("event_mix", "episode type probabilities as `start_hesitation, walking, turn`"),
    ("mean_episode_s", "mean episode duration"),
    ("mean_gap_s", "mean time between episodes"),
    ("noise_std", "additive noise standard deviation"),
    ("turn_artifact", "sway offset during turns"),
    ("start_hesitation_cue", "lean offset during start hesitation"),
    // model
    ("block_size", "samples per block"),
    ("patch_size", "samples per patch"),
    ("model_dim", "embedding width"),
    ("num_heads", "attention heads"),
    ("num_encoder_layers", "encoder layers"),
    ("ffn_dim", "feed-forward hidden width"),
    ("lstm_hidden", "LSTM hidden size per direction"),
    ("first_dropout", "dropout after the embedding"),
    ("encoder_dropout", "dropout on encoder branches"),
    ("mha_dropout", "dropout on attention weights"),
    ("pre_norm", "normalize before each sublayer"),
    ("layer_norm_eps", "layer norm epsilon"),
    // train
    ("batch_size", "blocks per step"),
    ("steps_per_epoch", "optimizer steps per epoch"),
    ("epochs", "number of epochs"),
    ("loss_eps", "prediction clip for the loss"),
    ("mask_floor", "minimum total mask per batch"),
    ("stride", "training block stride (0 means block_size)"),
    ("validation_fraction", "fraction of records held out"),
    ("folds", "cross-validation folds (1 disables)"),
    ("peak_lr", "peak learning rate"),
    ("warmup_steps", "warm-up steps"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("cosine_decay", "cosine decay after warm-up"),
    // eval
    ("threshold", "decision threshold"),
];

const MODEL_KEYS: &[&str] = &[
    "block_size",
    "patch_size",
    "model_dim",
    "num_heads",
    "num_encoder_layers",
    "ffn_dim",
    "lstm_hidden",
    "first_dropout",
    "encoder_dropout",
    "mha_dropout",
    "pre_norm",
    "layer_norm_eps",
];

const SYNTH_REQUIRED: &[&str] = &["kind", "seed", "n_records"];
const TRAIN_REQUIRED: &[&str] = &["kind", "seed", "epochs", "steps_per_epoch", "batch_size", "block_size", "patch_size"];

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Runtime(String),
    Compat(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Compat(_) => EXIT_COMPAT,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Compat(m) => write!(f, "incompatible input: {m}"),
        }
    }
}

fn io_err(path: &Path, e: impl Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut values = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if !is_known(key) {
            return Err(CliError::Config(format!("line {}: unknown key `{key}`", n + 1)));
        }
        if values.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(values)
}

/// Resolved flat configuration: file values with command-line overrides.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub values: BTreeMap<String, String>,
    pub config_path: Option<PathBuf>,
}

impl Settings {
    pub fn load(config_path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut values = match config_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                parse_config_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            if !is_known(k) {
                return Err(CliError::Config(format!("unknown key `{k}`")));
            }
            values.insert(k.clone(), v.clone());
        }
        Ok(Settings { values, config_path: config_path.map(Path::to_path_buf) })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| CliError::Config(format!("`{key}` = `{v}`: {e}"))))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(v) => Err(CliError::Config(format!("`{key}` = `{v}`: expected true or false"))),
        }
    }

    fn get_list(&self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|x| x.trim().parse::<f64>().map_err(|e| CliError::Config(format!("`{key}` = `{v}`: {e}"))))
                    .collect()
            })
            .transpose()
    }

    pub fn require(&self, keys: &[&str]) -> Result<(), CliError> {
        match keys.iter().find(|k| !self.values.contains_key(**k)) {
            Some(k) => Err(CliError::Config(format!("missing required key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn kind(&self) -> Result<Option<DatasetKind>, CliError> {
        self.raw("kind").map(|v| v.parse().map_err(CliError::Config)).transpose()
    }

    pub fn synth_config(&self) -> Result<SynthConfig, CliError> {
        let d = SynthConfig::default();
        let mut c = SynthConfig {
            kind: self.kind()?.unwrap_or(d.kind),
            duration_s: self.get_or("duration_s", d.duration_s)?,
            gait_freq_hz: self.get_or("gait_freq_hz", d.gait_freq_hz)?,
            mean_episode_s: self.get_or("mean_episode_s", d.mean_episode_s)?,
            mean_gap_s: self.get_or("mean_gap_s", d.mean_gap_s)?,
            noise_std: self.get_or("noise_std", d.noise_std)?,
            seed: self.get_or("seed", d.seed)?,
            turn_artifact: self.get_bool("turn_artifact", d.turn_artifact)?,
            start_hesitation_cue: self.get_bool("start_hesitation_cue", d.start_hesitation_cue)?,
            ..d
        };
        if let Some(band) = self.get_list("freeze_band_hz")? {
            let [low, high] = band[..] else {
                return Err(CliError::Config("`freeze_band_hz` needs two values".into()));
            };
            c.freeze_band_hz = (low, high);
        }
        if let Some(mix) = self.get_list("event_mix")? {
            c.event_mix = mix
                .try_into()
                .map_err(|_| CliError::Config("`event_mix` needs three values".into()))?;
        }
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let d = ModelConfig::default();
        let c = ModelConfig {
            block_size: self.get_or("block_size", d.block_size)?,
            patch_size: self.get_or("patch_size", d.patch_size)?,
            model_dim: self.get_or("model_dim", d.model_dim)?,
            num_heads: self.get_or("num_heads", d.num_heads)?,
            num_encoder_layers: self.get_or("num_encoder_layers", d.num_encoder_layers)?,
            ffn_dim: self.get_or("ffn_dim", d.ffn_dim)?,
            lstm_hidden: self.get_or("lstm_hidden", d.lstm_hidden)?,
            first_dropout: self.get_or("first_dropout", d.first_dropout)?,
            encoder_dropout: self.get_or("encoder_dropout", d.encoder_dropout)?,
            mha_dropout: self.get_or("mha_dropout", d.mha_dropout)?,
            pre_norm: self.get_bool("pre_norm", d.pre_norm)?,
            layer_norm_eps: self.get_or("layer_norm_eps", d.layer_norm_eps)?,
        };
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn run_config(&self) -> Result<TrainRunConfig, CliError> {
        let d = TrainRunConfig::default();
        let a = AdamConfig::default();
        Ok(TrainRunConfig {
            batch_size: self.get_or("batch_size", d.batch_size)?,
            steps_per_epoch: self.get_or("steps_per_epoch", d.steps_per_epoch)?,
            epochs: self.get_or("epochs", d.epochs)?,
            seed: self.get_or("seed", d.seed)?,
            loss_eps: self.get_or("loss_eps", d.loss_eps)?,
            mask_floor: self.get_or("mask_floor", d.mask_floor)?,
            stride: self.get_or("stride", d.stride)?,
            validation_fraction: self.get_or("validation_fraction", d.validation_fraction)?,
            threshold: self.get_or("threshold", d.threshold)?,
            adam: AdamConfig {
                peak_lr: self.get_or("peak_lr", a.peak_lr)?,
                warmup_steps: self.get_or("warmup_steps", a.warmup_steps)?,
                beta1: self.get_or("beta1", a.beta1)?,
                beta2: self.get_or("beta2", a.beta2)?,
                eps: self.get_or("adam_eps", a.eps)?,
                cosine_decay: self.get_bool("cosine_decay", a.cosine_decay)?,
                total_steps: 0,
            },
            threads: self.get("threads")?,
            progress: true,
        })
    }

    /// Model keys given explicitly that disagree with `config`.
    pub fn model_mismatches(&self, config: &ModelConfig) -> Result<Vec<String>, CliError> {
        let stored = serde_json::to_value(config).expect("config serializes");
        let mut out = Vec::new();
        for key in MODEL_KEYS {
            let Some(given) = self.raw(key) else { continue };
            let expected = &stored[*key];
            let same = match expected {
                serde_json::Value::Bool(b) => self.get_bool(key, !b)? == *b,
                serde_json::Value::Number(n) => given.parse::<f64>().ok() == n.as_f64(),
                _ => false,
            };
            if !same {
                out.push(format!("{key}: checkpoint has {expected}, config has {given}"));
            }
        }
        Ok(out)
    }
}

/// Written into the output location before a command starts working.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, settings: &Settings, artifacts: &[(&str, PathBuf)]) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: settings.config_path.clone(),
            resolved: settings.values.clone(),
            seed: settings.get("seed").ok().flatten(),
            artifacts: artifacts.iter().map(|(k, p)| (k.to_string(), p.clone())).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn cmd_synth(settings: &Settings, out_dir: &Path) -> Result<(), CliError> {
    settings.require(SYNTH_REQUIRED)?;
    let config = settings.synth_config()?;
    let n: usize = settings.get_or("n_records", 0)?;
    create_dir(out_dir)?;
    RunManifest::new("synth", settings, &[("data", out_dir.to_path_buf())]).write(&out_dir.join(RUN_MANIFEST_FILE))?;
    match generate_dataset(&config, n, out_dir) {
        Ok(rows) => {
            eprintln!("wrote {} records to {}", rows.len(), out_dir.display());
            Ok(())
        }
        Err(SynthError::ConfigInvalid { key, reason }) => Err(CliError::Config(format!("`{key}`: {reason}"))),
        Err(e @ SynthError::Io { .. }) => Err(CliError::Io(e.to_string())),
    }
}

/// Kind of each file: the synth manifest if present, then the header
/// (validity columns mean defog), then `fallback`.
fn load_records(data_dir: &Path, fallback: DatasetKind) -> Result<Vec<TimeSeriesRecord>, CliError> {
    let manifest_path = data_dir.join(MANIFEST_FILE);
    let from_manifest: BTreeMap<String, DatasetKind> = if manifest_path.is_file() {
        read_manifest(&manifest_path)
            .map_err(|e| io_err(&manifest_path, e))?
            .into_iter()
            .map(|r| (r.id, r.kind))
            .collect()
    } else {
        BTreeMap::new()
    };
    load_dataset_with(data_dir, |id: &str, header: &[String]| {
        from_manifest
            .get(id)
            .copied()
            .or_else(|| DatasetKind::infer_from_header(header))
            .unwrap_or(fallback)
    })
    .map_err(|e| io_err(data_dir, e))
}

fn check_kind(records: &[TimeSeriesRecord], expected: DatasetKind, code: fn(String) -> CliError) -> Result<(), CliError> {
    match records.iter().find(|r| r.kind != expected) {
        Some(r) => Err(code(
            TrainError::MixedDatasetKind { id: r.id.clone(), expected, found: r.kind }.to_string(),
        )),
        None => Ok(()),
    }
}

pub fn cmd_train(settings: &Settings, data_dir: &Path, out_dir: &Path) -> Result<(), CliError> {
    settings.require(TRAIN_REQUIRED)?;
    let kind = settings.kind()?.expect("required");
    let model = settings.model_config()?;
    let run = settings.run_config()?;
    run.validate(&model).map_err(|e| CliError::Config(e.to_string()))?;
    let folds: usize = settings.get_or("folds", 1)?;
    if folds == 0 {
        return Err(CliError::Config("`folds` must be at least 1".into()));
    }

    create_dir(out_dir)?;
    let fold_dirs: Vec<PathBuf> =
        if folds == 1 { vec![out_dir.to_path_buf()] } else { (0..folds).map(|f| out_dir.join(format!("fold_{f}"))).collect() };
    let mut artifacts = Vec::new();
    for dir in &fold_dirs {
        artifacts.push(("checkpoint", dir.join(CHECKPOINT_FILE)));
        artifacts.push(("history", dir.join(HISTORY_FILE)));
        artifacts.push(("epoch_metrics", dir.join(EPOCHS_FILE)));
    }
    RunManifest::new("train", settings, &artifacts).write(&out_dir.join(RUN_MANIFEST_FILE))?;

    let records = load_records(data_dir, kind)?;
    if records.is_empty() {
        return Err(CliError::Runtime(TrainError::EmptyDataset.to_string()));
    }
    check_kind(&records, kind, CliError::Runtime)?;

    for (fold, dir) in fold_dirs.iter().enumerate() {
        let (train_set, val_set) =
            if folds == 1 { split_records(&records, run.validation_fraction) } else { fold_split(&records, fold, folds) };
        if folds > 1 {
            create_dir(dir)?;
            eprintln!("fold {}/{folds}", fold + 1);
        }
        let out = train_with_split(&train_set, &val_set, &model, &run).map_err(|e| CliError::Runtime(e.to_string()))?;
        let checkpoint = Checkpoint::new(&out.params, &model, run.seed, Some(out.kind));
        let path = dir.join(CHECKPOINT_FILE);
        checkpoint.save(&path).map_err(|e| io_err(&path, e))?;
        let mut history = Vec::new();
        out.history.write_steps_csv(&mut history).expect("in-memory write");
        let path = dir.join(HISTORY_FILE);
        std::fs::write(&path, history).map_err(|e| io_err(&path, e))?;
        let mut epochs = Vec::new();
        out.history.write_epochs_csv(&mut epochs).expect("in-memory write");
        let path = dir.join(EPOCHS_FILE);
        std::fs::write(&path, epochs).map_err(|e| io_err(&path, e))?;

        if let Some(last) = out.history.epochs.last() {
            println!("epoch {}  train_loss {:.6}", last.epoch + 1, last.train_loss);
            if let Some(m) = &last.metrics {
                print!("{}", m.table());
            }
        }
    }
    Ok(())
}

fn load_checkpoint(settings: &Settings, path: &Path) -> Result<(Checkpoint, crate::model::ModelParams), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let checkpoint = Checkpoint::from_json(&text).map_err(|e| CliError::Compat(format!("{}: {e}", path.display())))?;
    let params = checkpoint.to_params().map_err(|e| CliError::Compat(format!("{}: {e}", path.display())))?;
    let mismatches = settings.model_mismatches(&checkpoint.config)?;
    if !mismatches.is_empty() {
        return Err(CliError::Compat(mismatches.join("; ")));
    }
    if let (Some(expected), Some(stored)) = (settings.kind()?, checkpoint.kind) {
        if expected != stored {
            return Err(CliError::Compat(format!("checkpoint was trained on {stored}, config kind is {expected}")));
        }
    }
    Ok((checkpoint, params))
}

fn eval_error(e: EvalError) -> CliError {
    match e {
        EvalError::ThresholdOutOfRange(_) => CliError::Config(e.to_string()),
        EvalError::MixedDatasetKind { .. } => CliError::Compat(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

pub fn cmd_eval(settings: &Settings, checkpoint_path: &Path, data_dir: &Path, out_dir: Option<&Path>) -> Result<(), CliError> {
    let threshold: f64 = settings.get_or("threshold", DEFAULT_THRESHOLD)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(CliError::Config(format!("`threshold` = {threshold} must lie in (0, 1)")));
    }
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        RunManifest::new("eval", settings, &[("metrics", dir.join(METRICS_FILE))]).write(&dir.join(RUN_MANIFEST_FILE))?;
    }
    let (checkpoint, params) = load_checkpoint(settings, checkpoint_path)?;
    let kind = checkpoint.kind.or(settings.kind()?).unwrap_or(DatasetKind::Tdcsfog);
    let records = load_records(data_dir, kind)?;
    check_kind(&records, kind, CliError::Compat)?;
    let threads = settings.get("threads")?;
    let predictions = crate::eval::predict_dataset(&records, &params, &checkpoint.config, threads).map_err(eval_error)?;
    let report = score_predictions(&predictions, threshold).map_err(eval_error)?;
    print!("{}", report.table());
    let mut kv = Vec::new();
    report.write_key_values(&mut kv).expect("in-memory write");
    match out_dir {
        Some(dir) => {
            let path = dir.join(METRICS_FILE);
            std::fs::write(&path, kv).map_err(|e| io_err(&path, e))?;
        }
        None => print!("{}", String::from_utf8(kv).expect("utf-8")),
    }
    Ok(())
}

pub fn cmd_predict(settings: &Settings, checkpoint_path: &Path, csv_in: &Path, csv_out: &Path) -> Result<(), CliError> {
    let mut manifest_path = csv_out.as_os_str().to_owned();
    manifest_path.push(".manifest.json");
    if let Some(parent) = csv_out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    RunManifest::new("predict", settings, &[("predictions", csv_out.to_path_buf())])
        .write(Path::new(&manifest_path))?;
    let (checkpoint, params) = load_checkpoint(settings, checkpoint_path)?;
    let text = std::fs::read_to_string(csv_in).map_err(|e| io_err(csv_in, e))?;
    let header: Vec<String> = text.lines().next().unwrap_or("").split(',').map(|s| s.trim().to_string()).collect();
    let kind = checkpoint
        .kind
        .or(settings.kind()?)
        .or_else(|| DatasetKind::infer_from_header(&header))
        .unwrap_or(DatasetKind::Tdcsfog);
    let record = parse_series(&text, kind, &record_id(csv_in)).map_err(|e| io_err(csv_in, e))?;
    let prediction = predict_record(&record, &params, &checkpoint.config).map_err(eval_error)?;
    let mut out = String::from("patch_start_time,start_hesitation,turn,walking\n");
    for (t, c) in prediction.patch_start_time.iter().zip(&prediction.confidences) {
        out.push_str(&format!("{t},{},{},{}\n", c[0], c[1], c[2]));
    }
    std::fs::write(csv_out, out).map_err(|e| io_err(csv_out, e))
}

/// Episode statistics of a dataset: counts per event type and a histogram
/// of episode durations in one-second bins.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub records: usize,
    pub samples: usize,
    pub episodes: [usize; 3],
    /// Bin `i` counts durations in `[i, i+1)` seconds; the last bin is open.
    pub duration_hist: Vec<usize>,
    pub positive_samples: [usize; 3],
}

pub fn dataset_stats(records: &[TimeSeriesRecord]) -> DatasetStats {
    let mut stats = DatasetStats {
        records: records.len(),
        samples: 0,
        episodes: [0; 3],
        duration_hist: vec![0; 11],
        positive_samples: [0; 3],
    };
    for r in records {
        stats.samples += r.len();
        let fs = r.kind.sampling_rate_hz();
        for k in 0..3 {
            for (s, e) in label_runs(&r.labels[k]) {
                stats.episodes[k] += 1;
                stats.positive_samples[k] += e - s;
                let bin = (((e - s) as f64 / fs).floor() as usize).min(stats.duration_hist.len() - 1);
                stats.duration_hist[bin] += 1;
            }
        }
    }
    stats
}

impl DatasetStats {
    pub fn render(&self) -> String {
        let names = ["StartHesitation", "Turn", "Walking"];
        let total: usize = self.episodes.iter().sum();
        let mut s = format!("records {}  samples {}  episodes {total}\n", self.records, self.samples);
        s.push_str("event distribution\n");
        for k in 0..3 {
            let share = if total > 0 { 100.0 * self.episodes[k] as f64 / total as f64 } else { 0.0 };
            let prevalence = if self.samples > 0 { 100.0 * self.positive_samples[k] as f64 / self.samples as f64 } else { 0.0 };
            s.push_str(&format!(
                "  {:<16}{:>6} episodes {:>6.1}%   {:>5.2}% of samples\n",
                names[k], self.episodes[k], share, prevalence
            ));
        }
        s.push_str("episode duration\n");
        let peak = self.duration_hist.iter().copied().max().unwrap_or(0).max(1);
        for (i, &c) in self.duration_hist.iter().enumerate() {
            let label = if i + 1 == self.duration_hist.len() { format!("{i}+ s") } else { format!("{i}-{} s", i + 1) };
            s.push_str(&format!("  {label:<8}{c:>6} {}\n", "#".repeat(c * 40 / peak)));
        }
        s
    }
}

pub fn cmd_inspect(settings: &Settings, data_dir: &Path) -> Result<(), CliError> {
    let kind = settings.kind()?.unwrap_or(DatasetKind::Tdcsfog);
    if list_record_files(data_dir).map_err(|e| io_err(data_dir, e))?.is_empty() {
        return Err(CliError::Io(format!("{}: no CSV recordings", data_dir.display())));
    }
    let records = load_records(data_dir, kind)?;
    print!("{}", dataset_stats(&records).render());
    Ok(())
}

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").value_name("PATH").help("flat key = value config file"));
    KEYS.iter().fold(cmd, |cmd, (key, help)| {
        cmd.arg(Arg::new(*key).long(*key).value_name("VALUE").help(*help).help_heading("Config keys"))
    })
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("PATH").required(true).value_parser(clap::value_parser!(PathBuf)).help(help)
}

pub fn command() -> Command {
    Command::new("fogdet")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Freezing-of-gait detection from accelerometer recordings")
        .subcommand_required(true)
        .subcommand(
            with_keys(Command::new("synth").about("write a synthetic dataset"))
                .arg(path_arg("out", "output directory"))
                .arg(Arg::new("n").long("n").value_name("N").help("number of records (same as --n_records)")),
        )
        .subcommand(
            with_keys(Command::new("train").about("train a model"))
                .arg(path_arg("data", "directory of CSV recordings"))
                .arg(path_arg("out", "output directory")),
        )
        .subcommand(
            with_keys(Command::new("eval").about("score a checkpoint on labeled recordings"))
                .arg(path_arg("checkpoint", "checkpoint file"))
                .arg(path_arg("data", "directory of CSV recordings"))
                .arg(path_arg("out", "directory for the metrics file").required(false)),
        )
        .subcommand(
            with_keys(Command::new("predict").about("write per-patch confidences for one recording"))
                .arg(path_arg("checkpoint", "checkpoint file"))
                .arg(path_arg("input", "CSV recording"))
                .arg(path_arg("output", "CSV file to write")),
        )
        .subcommand(
            with_keys(Command::new("inspect").about("print event and duration statistics"))
                .arg(path_arg("data", "directory of CSV recordings")),
        )
}

fn settings_from(m: &ArgMatches) -> Result<Settings, CliError> {
    let mut overrides: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    if let Ok(Some(n)) = m.try_get_one::<String>("n") {
        overrides.push(("n_records".into(), n.clone()));
    }
    Settings::load(m.get_one::<String>("config").map(Path::new), &overrides)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    m.get_one::<PathBuf>(name).expect("required by clap")
}

fn dispatch(name: &str, m: &ArgMatches) -> Result<(), CliError> {
    let settings = settings_from(m)?;
    match name {
        "synth" => cmd_synth(&settings, path(m, "out")),
        "train" => cmd_train(&settings, path(m, "data"), path(m, "out")),
        "eval" => cmd_eval(&settings, path(m, "checkpoint"), path(m, "data"), m.get_one::<PathBuf>("out").map(PathBuf::as_path)),
        "predict" => cmd_predict(&settings, path(m, "checkpoint"), path(m, "input"), path(m, "output")),
        "inspect" => cmd_inspect(&settings, path(m, "data")),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match dispatch(name, sub) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_parsing() {
        let v = parse_config_text("# comment\nseed = 4\n\nkind=defog  # trailing\n").unwrap();
        assert_eq!(v["seed"], "4");
        assert_eq!(v["kind"], "defog");
        assert!(matches!(parse_config_text("bogus = 1"), Err(CliError::Config(m)) if m.contains("bogus")));
        assert!(parse_config_text("seed 4").is_err());
        assert!(parse_config_text("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn overrides_win() {
        let s = Settings::load(None, &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(s.get::<u64>("seed").unwrap(), Some(9));
        assert!(Settings::load(None, &[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn synth_settings() {
        let s = Settings::load(
            None,
            &[("event_mix".into(), "0.1, 0.2, 0.7".into()), ("freeze_band_hz".into(), "5, 9".into())],
        )
        .unwrap();
        let c = s.synth_config().unwrap();
        assert_eq!(c.event_mix, [0.1, 0.2, 0.7]);
        assert_eq!(c.freeze_band_hz, (5.0, 9.0));
        let bad = Settings::load(None, &[("event_mix".into(), "0.1, 0.2, 0.6".into())]).unwrap();
        assert!(matches!(bad.synth_config(), Err(CliError::Config(m)) if m.contains("event_mix")));
    }

    #[test]
    fn model_mismatch_detection() {
        let c = ModelConfig::default();
        let s = Settings::load(None, &[("patch_size".into(), "16".into()), ("block_size".into(), "864".into())]).unwrap();
        let m = s.model_mismatches(&c).unwrap();
        assert_eq!(m.len(), 1);
        assert!(m[0].starts_with("patch_size"));
        let s = Settings::load(None, &[("pre_norm".into(), "false".into())]).unwrap();
        assert!(s.model_mismatches(&c).unwrap().is_empty());
    }

    #[test]
    fn stats_histogram() {
        let mut labels = [vec![0u8; 400], vec![0u8; 400], vec![0u8; 400]];
        for v in &mut labels[1][10..138] {
            *v = 1;
        }
        for v in &mut labels[2][200..230] {
            *v = 1;
        }
        let r = TimeSeriesRecord {
            id: "r".into(),
            kind: DatasetKind::Tdcsfog,
            time: (0..400).collect(),
            acc: [vec![0.0; 400], vec![0.0; 400], vec![0.0; 400]],
            labels,
            validity: [vec![1; 400], vec![1; 400]],
            labeled: true,
            validity_annotated: false,
        };
        let s = dataset_stats(&[r]);
        assert_eq!(s.episodes, [0, 1, 1]);
        assert_eq!(s.duration_hist[0], 1);
        assert_eq!(s.duration_hist[1], 1);
        assert!(s.render().contains("Turn"));
    }

    #[test]
    fn clap_definition_is_consistent() {
        command().debug_assert();
    }
}
