//! End-to-end runs of the command-line tool plus dataset-level checks of the
//! synthetic generator.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fogdet::cli::{self, CHECKPOINT_FILE, EXIT_COMPAT, EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_RUNTIME, HISTORY_FILE, METRICS_FILE};
use fogdet::eval::score_patches;
use fogdet::ingest::{load_dataset, parse_series, DatasetKind, MANIFEST_FILE};
use fogdet::synth::{generate, generate_dataset, label_runs, read_manifest, record_seeds, EventClass, SynthConfig};
use tempfile::TempDir;

const MODEL: &str = "block_size = 32\npatch_size = 8\nmodel_dim = 8\nnum_heads = 2\nnum_encoder_layers = 1\n\
                     ffn_dim = 16\nlstm_hidden = 4\n";
const TRAIN: &str = "batch_size = 8\nsteps_per_epoch = 4\nepochs = 2\nthreads = 1\n";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        Workspace { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn config(&self, name: &str, text: &str) -> String {
        std::fs::write(self.path(name), text).unwrap();
        self.arg(name)
    }
}

fn fogdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fogdet")).args(args).output().unwrap()
}

fn synth_config(kind: &str, seed: u64, n: usize) -> String {
    format!("kind = {kind}\nseed = {seed}\nn_records = {n}\nduration_s = 20\nturn_artifact = true\n")
}

fn key_values(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn synth_writes_records_and_manifest() {
    let ws = Workspace::new();
    let conf = ws.config("s.conf", &synth_config("tdcsfog", 1, 4));
    let out = fogdet(&["synth", "--config", &conf, "--out", &ws.arg("data")]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let csvs = std::fs::read_dir(ws.path("data"))
        .unwrap()
        .filter(|e| {
            let path = e.as_ref().unwrap().path();
            path.extension().is_some_and(|x| x == "csv") && path.file_name().unwrap() != MANIFEST_FILE
        })
        .count();
    assert_eq!(csvs, 4);
    assert!(ws.path("data").join(MANIFEST_FILE).exists());
}

#[test]
fn unwritable_output_is_an_io_error() {
    let ws = Workspace::new();
    std::fs::write(ws.path("file"), "not a directory").unwrap();
    let conf = ws.config("s.conf", &synth_config("tdcsfog", 1, 2));
    let out = fogdet(&["synth", "--config", &conf, "--out", &ws.arg("file/data")]);
    assert_eq!(out.status.code(), Some(EXIT_IO));
}

#[test]
fn bad_event_mix_names_the_key() {
    let ws = Workspace::new();
    let conf = ws.config("s.conf", &(synth_config("tdcsfog", 1, 2) + "event_mix = 0.5, 0.3, 0.3\n"));
    let out = fogdet(&["synth", "--config", &conf, "--out", &ws.arg("data")]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("event_mix"));
}

#[test]
fn missing_key_names_the_key() {
    let ws = Workspace::new();
    let conf = ws.config("s.conf", &synth_config("tdcsfog", 1, 2));
    assert_eq!(fogdet(&["synth", "--config", &conf, "--out", &ws.arg("data")]).status.code(), Some(EXIT_OK));
    let train = ws.config("t.conf", &format!("kind = tdcsfog\nseed = 1\n{MODEL}batch_size = 8\nepochs = 1\n"));
    let out = fogdet(&["train", "--config", &train, "--data", &ws.arg("data"), "--out", &ws.arg("run")]);
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps_per_epoch"));
}

#[test]
fn flags_override_the_config_file() {
    let ws = Workspace::new();
    let conf = ws.config("s.conf", &synth_config("tdcsfog", 1, 5));
    let out = fogdet(&["synth", "--config", &conf, "--n_records", "2", "--out", &ws.arg("data")]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert_eq!(read_manifest(&ws.path("data").join(MANIFEST_FILE)).unwrap().len(), 2);
}

#[test]
fn mixed_kinds_fail_training() {
    let ws = Workspace::new();
    let data = ws.path("data");
    generate_dataset(&SynthConfig { duration_s: 20.0, seed: 1, ..Default::default() }, 2, &data).unwrap();
    let defog = generate(&SynthConfig { kind: DatasetKind::Defog, duration_s: 20.0, seed: 2, ..Default::default() }, "x")
        .unwrap()
        .record;
    std::fs::write(data.join("extra_defog.csv"), defog.to_csv()).unwrap();
    std::fs::remove_file(data.join(MANIFEST_FILE)).unwrap();
    let train = ws.config("t.conf", &format!("kind = tdcsfog\nseed = 1\n{MODEL}{TRAIN}"));
    let out = fogdet(&["train", "--config", &train, "--data", &ws.arg("data"), "--out", &ws.arg("run")]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME), "{}", String::from_utf8_lossy(&out.stderr));
}

fn trained(ws: &Workspace) -> String {
    let conf = ws.config("s.conf", &synth_config("tdcsfog", 3, 3));
    assert_eq!(fogdet(&["synth", "--config", &conf, "--out", &ws.arg("data")]).status.code(), Some(EXIT_OK));
    let train = ws.config("t.conf", &format!("kind = tdcsfog\nseed = 1\nvalidation_fraction = 0\n{MODEL}{TRAIN}"));
    let out = fogdet(&["train", "--config", &train, "--data", &ws.arg("data"), "--out", &ws.arg("run")]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    train
}

#[test]
fn train_writes_checkpoint_and_history() {
    let ws = Workspace::new();
    trained(&ws);
    assert!(ws.path("run").join(CHECKPOINT_FILE).exists());
    let history = std::fs::read_to_string(ws.path("run").join(HISTORY_FILE)).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some("step,epoch,lr,loss"));
    assert_eq!(lines.count(), 2 * 4);
}

#[test]
fn patch_size_mismatch_is_incompatible() {
    let ws = Workspace::new();
    let train = trained(&ws);
    let checkpoint = ws.path("run").join(CHECKPOINT_FILE);
    let out = fogdet(&[
        "eval", "--config", &train, "--patch_size", "16", "--checkpoint", &checkpoint.to_string_lossy(), "--data",
        &ws.arg("data"),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_COMPAT));
}

#[test]
fn predictions_rescore_to_the_eval_report() {
    let ws = Workspace::new();
    let train = trained(&ws);
    let checkpoint = ws.path("run").join(CHECKPOINT_FILE).to_string_lossy().into_owned();

    // Evaluate a directory holding just one record.
    let data = ws.path("data");
    let file = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().unwrap() != MANIFEST_FILE)
        .min()
        .unwrap();
    std::fs::create_dir(ws.path("single")).unwrap();
    std::fs::copy(&file, ws.path("single").join(file.file_name().unwrap())).unwrap();
    let out = fogdet(&["eval", "--config", &train, "--checkpoint", &checkpoint, "--data", &ws.arg("single"), "--out", &ws.arg("ev")]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));
    let report = key_values(&ws.path("ev").join(METRICS_FILE));

    let out = fogdet(&["predict", "--config", &train, "--checkpoint", &checkpoint, "--input", &file.to_string_lossy(), "--output", &ws.arg("pred.csv")]);
    assert_eq!(out.status.code(), Some(EXIT_OK), "{}", String::from_utf8_lossy(&out.stderr));

    let mut reader = csv::Reader::from_path(ws.path("pred.csv")).unwrap();
    let conf: Vec<[f64; 3]> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            [1, 2, 3].map(|i| r[i].parse().unwrap())
        })
        .collect();
    let record = parse_series(&std::fs::read_to_string(&file).unwrap(), DatasetKind::Tdcsfog, "r").unwrap();
    let patch = 8;
    let labels: Vec<[u8; 3]> = (0..conf.len())
        .map(|p| [0, 1, 2].map(|k| *record.labels[k][p * patch..(p + 1) * patch].iter().max().unwrap()))
        .collect();
    let mask: Vec<u8> = (0..conf.len())
        .map(|p| (p * patch..(p + 1) * patch).map(|i| record.validity[0][i] * record.validity[1][i]).min().unwrap())
        .collect();
    let rescored = score_patches(&conf, &labels, &mask, 0.5).unwrap();

    let mut compared = 0;
    for (key, value) in rescored.key_values() {
        let expected = &report[key];
        match (value.parse::<f64>(), expected.parse::<f64>()) {
            (Ok(a), Ok(b)) => assert!((a - b).abs() <= 1e-9, "{key}: {a} vs {b}"),
            _ => assert_eq!(&value, expected, "{key}"),
        }
        compared += 1;
    }
    assert_eq!(compared, 11);
}

#[test]
fn inspect_reports_statistics() {
    let ws = Workspace::new();
    let conf = ws.config("s.conf", &synth_config("defog", 5, 2));
    assert_eq!(fogdet(&["synth", "--config", &conf, "--out", &ws.arg("data")]).status.code(), Some(EXIT_OK));
    let out = fogdet(&["inspect", "--config", &conf, "--data", &ws.arg("data")]);
    assert_eq!(out.status.code(), Some(EXIT_OK));
    assert!(!out.stdout.is_empty());
}

#[test]
fn unknown_keys_are_rejected() {
    let ws = Workspace::new();
    let conf = ws.config("s.conf", &(synth_config("tdcsfog", 1, 2) + "bogus = 1\n"));
    assert_eq!(cli::run(["fogdet", "synth", "--config", &conf, "--out", &ws.arg("data")]), EXIT_CONFIG);
    assert!(!ws.path("data").exists());
}

// ---------------------------------------------------------------- synth datasets

#[test]
fn dataset_sizes() {
    let ws = Workspace::new();
    let config = SynthConfig { duration_s: 10.0, seed: 4, ..Default::default() };
    let rows = generate_dataset(&config, 3, &ws.path("three")).unwrap();
    assert_eq!(rows.len(), 3);
    let records = load_dataset(&ws.path("three"), DatasetKind::Tdcsfog).unwrap();
    assert_eq!(records.len(), 3);

    let rows = generate_dataset(&config, 0, &ws.path("none")).unwrap();
    assert!(rows.is_empty());
    let entries: Vec<_> = std::fs::read_dir(ws.path("none")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(entries, vec![std::ffi::OsString::from(MANIFEST_FILE)]);
    assert!(read_manifest(&ws.path("none").join(MANIFEST_FILE)).unwrap().is_empty());
}

#[test]
fn manifest_counts_match_written_onsets() {
    let ws = Workspace::new();
    let config = SynthConfig { kind: DatasetKind::Defog, seed: 12, ..Default::default() };
    generate_dataset(&config, 6, &ws.path("d")).unwrap();
    let manifest = read_manifest(&ws.path("d").join(MANIFEST_FILE)).unwrap();
    for row in manifest {
        let text = std::fs::read_to_string(ws.path("d").join(format!("{}.csv", row.id))).unwrap();
        let record = parse_series(&text, DatasetKind::Defog, &row.id).unwrap();
        let onsets: usize = record.labels.iter().map(|c| label_runs(c).len()).sum();
        assert_eq!(onsets, row.n_episodes, "{}", row.id);
    }
}

/// Collects the first `n` episodes from records generated under `config`.
fn episodes(config: &SynthConfig, n: usize) -> Vec<(fogdet::synth::Synthesized, usize)> {
    let mut out = Vec::new();
    let mut total = 0;
    for seed in record_seeds(config.seed, 10_000) {
        let s = generate(&SynthConfig { seed, ..config.clone() }, "e").unwrap();
        let take = s.episodes.len().min(n - total);
        total += take;
        out.push((s, take));
        if total == n {
            break;
        }
    }
    assert_eq!(total, n);
    out
}

#[test]
fn most_episodes_are_short() {
    let config = SynthConfig { seed: 21, ..Default::default() };
    let fs = config.sampling_rate_hz();
    let eps = episodes(&config, 300);
    let short = eps
        .iter()
        .flat_map(|(s, take)| s.episodes[..*take].iter())
        .filter(|e| e.len() as f64 / fs <= 5.0)
        .count();
    assert!(short * 100 >= 60 * 300, "{short} of 300 last at most 5 s");
}

#[test]
fn event_types_follow_the_mix() {
    let config = SynthConfig { seed: 22, ..Default::default() };
    let eps = episodes(&config, 200);
    let mut counts = [0usize; 3];
    for e in eps.iter().flat_map(|(s, take)| s.episodes[..*take].iter()) {
        counts[e.class.channel()] += 1;
    }
    for class in [EventClass::StartHesitation, EventClass::Turn, EventClass::Walking] {
        let freq = counts[class.channel()] as f64 / 200.0;
        assert!((freq - config.mix_of(class)).abs() <= 0.05, "{class}: {freq}");
    }
}

fn dominant_frequency(x: &[f64], fs: f64) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    (50..=2000)
        .map(|k| {
            let f = k as f64 * 0.01;
            let w = std::f64::consts::TAU * f / fs;
            let (re, im) = x.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, v)| {
                let (s, c) = (w * n as f64).sin_cos();
                (re + (v - mean) * c, im - (v - mean) * s)
            });
            (f, re * re + im * im)
        })
        .fold((0.0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
        .0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn freezes_sit_well_above_walking_in_frequency() {
    let config = SynthConfig { seed: 23, ..Default::default() };
    let fs = config.sampling_rate_hz();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for (s, take) in episodes(&config, 60) {
        let v = &s.record.acc[0];
        let mut prev_end = 0;
        for e in &s.episodes[..take] {
            inside.push(dominant_frequency(&v[e.start..e.end], fs));
            outside.push(dominant_frequency(&v[prev_end..e.start], fs));
            prev_end = e.end;
        }
    }
    let (a, b) = (median(inside), median(outside));
    assert!(a - b >= 3.0, "episode median {a} Hz, walking median {b} Hz");
}
