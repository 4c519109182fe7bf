use std::f64::consts::TAU;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetKind, TimeSeriesRecord, MANIFEST_FILE};
use crate::nncore::SeededRng;

pub const GRAVITY: f64 = 9.81;
/// Longest allowed episode, in seconds.
pub const MAX_EPISODE_S: f64 = 10.0;
/// Shortest episode and shortest gap between episodes, in seconds.
pub const MIN_EPISODE_S: f64 = 1.0;
pub const MIN_GAP_S: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid `{key}`: {reason}")]
    ConfigInvalid { key: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Event type of a freezing episode. The discriminant is its label channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventClass {
    StartHesitation = 0,
    Turn = 1,
    Walking = 2,
}

impl EventClass {
    pub const ALL: [EventClass; 3] = [EventClass::StartHesitation, EventClass::Turn, EventClass::Walking];

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EventClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventClass::StartHesitation => "StartHesitation",
            EventClass::Turn => "Turn",
            EventClass::Walking => "Walking",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: DatasetKind,
    pub duration_s: f64,
    pub gait_freq_hz: f64,
    pub freeze_band_hz: (f64, f64),
    /// Episode type probabilities, ordered StartHesitation, Walking, Turn.
    pub event_mix: [f64; 3],
    pub mean_episode_s: f64,
    /// Mean spacing between the end of one episode and the next onset.
    pub mean_gap_s: f64,
    /// Standard deviation of additive noise, in m/s².
    pub noise_std: f64,
    pub seed: u64,
    /// Adds a slow sway offset on AccML during Turn episodes and during
    /// some turns of normal walking.
    pub turn_artifact: bool,
    /// Adds a forward-lean offset on AccAP during StartHesitation episodes.
    pub start_hesitation_cue: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            kind: DatasetKind::Tdcsfog,
            duration_s: 60.0,
            gait_freq_hz: 2.0,
            freeze_band_hz: (6.0, 8.0),
            event_mix: [0.0428, 0.159, 0.7982],
            mean_episode_s: 3.0,
            mean_gap_s: 10.0,
            noise_std: 0.2,
            seed: 0,
            turn_artifact: false,
            start_hesitation_cue: false,
        }
    }
}

impl SynthConfig {
    pub fn sampling_rate_hz(&self) -> f64 {
        self.kind.sampling_rate_hz()
    }

    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sampling_rate_hz()).round() as usize
    }

    /// Probability of drawing `class`.
    pub fn mix_of(&self, class: EventClass) -> f64 {
        match class {
            EventClass::StartHesitation => self.event_mix[0],
            EventClass::Walking => self.event_mix[1],
            EventClass::Turn => self.event_mix[2],
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |key: &'static str, reason: String| Err(SynthError::ConfigInvalid { key, reason });
        if !(self.duration_s > 0.0) || self.num_samples() == 0 {
            return bad("duration_s", format!("{} gives no samples", self.duration_s));
        }
        let nyquist = self.sampling_rate_hz() / 2.0;
        let (low, high) = self.freeze_band_hz;
        if !(self.gait_freq_hz > 0.0 && self.gait_freq_hz < low) {
            return bad("gait_freq_hz", format!("{} must lie in (0, {low})", self.gait_freq_hz));
        }
        if !(low < high && high < nyquist) {
            return bad("freeze_band_hz", format!("({low}, {high}) must satisfy low < high < {nyquist}"));
        }
        if self.event_mix.iter().any(|p| !(*p >= 0.0)) {
            return bad("event_mix", format!("{:?} has a negative or non-numeric entry", self.event_mix));
        }
        let sum: f64 = self.event_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad("event_mix", format!("{:?} sums to {sum}, expected 1", self.event_mix));
        }
        if !(self.mean_episode_s >= MIN_EPISODE_S && self.mean_episode_s < MAX_EPISODE_S) {
            return bad("mean_episode_s", format!("{} must lie in [{MIN_EPISODE_S}, {MAX_EPISODE_S})", self.mean_episode_s));
        }
        if !(self.mean_gap_s >= MIN_GAP_S && self.mean_gap_s.is_finite()) {
            return bad("mean_gap_s", format!("{} must be at least {MIN_GAP_S}", self.mean_gap_s));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", format!("{} must be non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// A stretch of normal walking that carries a cue without freezing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoy {
    pub start: usize,
    pub end: usize,
    pub class: EventClass,
}

/// One freezing episode over samples `start..end`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode {
    pub start: usize,
    pub end: usize,
    pub class: EventClass,
    pub freq_hz: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub record: TimeSeriesRecord,
    pub episodes: Vec<Episode>,
    pub decoys: Vec<Decoy>,
    /// Gait frequency used for this record.
    pub gait_freq_hz: f64,
}

/// Exponential with a floor: `floor + Exp(mean − floor)`.
fn shifted_exp(rng: &mut SeededRng, floor: f64, mean: f64) -> f64 {
    if mean <= floor {
        return floor;
    }
    floor + Exp::new(1.0 / (mean - floor)).expect("positive rate").sample(rng)
}

fn draw_class(rng: &mut SeededRng, config: &SynthConfig) -> EventClass {
    let u = rng.uniform();
    let mut acc = 0.0;
    for class in [EventClass::StartHesitation, EventClass::Walking, EventClass::Turn] {
        acc += config.mix_of(class);
        if u < acc {
            return class;
        }
    }
    EventClass::Turn
}

/// Renewal process: gap, episode, gap, episode, … until the record ends.
/// Episodes that would run past the end are not started.
fn place_episodes(rng: &mut SeededRng, config: &SynthConfig, n: usize) -> Vec<Episode> {
    let fs = config.sampling_rate_hz();
    let (low, high) = config.freeze_band_hz;
    let mut episodes = Vec::new();
    let mut t = shifted_exp(rng, MIN_GAP_S, config.mean_gap_s);
    loop {
        let duration = loop {
            let d = shifted_exp(rng, MIN_EPISODE_S, config.mean_episode_s);
            if d <= MAX_EPISODE_S {
                break d;
            }
        };
        let class = draw_class(rng, config);
        let freq_hz = rng.uniform_in(low, high);
        let start = (t * fs).round() as usize;
        let end = ((t + duration) * fs).round() as usize;
        if end > n {
            break;
        }
        episodes.push(Episode { start, end, class, freq_hz });
        t += duration + shifted_exp(rng, MIN_GAP_S, config.mean_gap_s);
    }
    episodes
}

/// Turns without freezing: cued stretches of normal walking, at most one per
/// gap, kept 0.5 s away from the neighbouring episodes.
fn place_decoys(rng: &mut SeededRng, config: &SynthConfig, episodes: &[Episode], n: usize) -> Vec<Decoy> {
    if !config.turn_artifact {
        return Vec::new();
    }
    let fs = config.sampling_rate_hz();
    let margin = (0.5 * fs) as usize;
    let bounds: Vec<usize> = std::iter::once(0)
        .chain(episodes.iter().flat_map(|e| [e.start, e.end]))
        .chain(std::iter::once(n))
        .collect();
    let mut decoys = Vec::new();
    for gap in bounds.chunks(2) {
        let (lo, hi) = (gap[0] + margin, gap[1].saturating_sub(margin));
        let len = (rng.uniform_in(MIN_EPISODE_S, config.mean_episode_s + 1.0) * fs) as usize;
        let keep = rng.uniform() < 0.5;
        if keep && hi > lo + len {
            let start = lo + ((hi - lo - len) as f64 * rng.uniform()) as usize;
            decoys.push(Decoy { start, end: start + len, class: EventClass::Turn });
        }
    }
    decoys
}

/// Trapezoid envelope over `start..end` with 0.2 s ramps.
fn plateau(i: usize, start: usize, end: usize, fs: f64) -> f64 {
    let ramp = 0.2 * fs;
    let from_start = (i - start) as f64 + 0.5;
    let to_end = (end - i) as f64 - 0.5;
    (from_start / ramp).min(to_end / ramp).min(1.0)
}

fn cue_offset(config: &SynthConfig, class: EventClass, level: f64) -> (f64, f64) {
    match class {
        EventClass::Turn if config.turn_artifact => (2.0 * level, 0.0),
        EventClass::StartHesitation if config.start_hesitation_cue => (0.0, 3.5 * level),
        _ => (0.0, 0.0),
    }
}

/// Generates one record with its ground-truth episodes.
pub fn generate(config: &SynthConfig, id: &str) -> Result<Synthesized, SynthError> {
    config.validate()?;
    let n = config.num_samples();
    let fs = config.sampling_rate_hz();
    let mut rng = SeededRng::new(config.seed);
    // Small per-record tempo and phase variation.
    let gait = config.gait_freq_hz * rng.uniform_in(0.92, 1.08);
    let phases: [f64; 4] = std::array::from_fn(|_| rng.uniform_in(0.0, TAU));
    let episodes = place_episodes(&mut rng, config, n);
    let decoys = place_decoys(&mut rng.split(), config, &episodes, n);
    let noise = Normal::new(0.0, config.noise_std).expect("validated std");

    let mut acc = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut labels = [vec![0u8; n], vec![0u8; n], vec![0u8; n]];
    let mut current = episodes.iter().peekable();
    let mut current_decoy = decoys.iter().peekable();
    for i in 0..n {
        let t = i as f64 / fs;
        while current.peek().is_some_and(|e| e.end <= i) {
            current.next();
        }
        while current_decoy.peek().is_some_and(|d| d.end <= i) {
            current_decoy.next();
        }
        let episode = current.peek().filter(|e| e.start <= i);
        let (v, ml, ap) = match episode {
            None => {
                let w = TAU * gait * t;
                let (dml, dap) = match current_decoy.peek().filter(|d| d.start <= i) {
                    Some(d) => cue_offset(config, d.class, plateau(i, d.start, d.end, fs)),
                    None => (0.0, 0.0),
                };
                (
                    2.0 * (w + phases[0]).sin() + 0.6 * (2.0 * w + phases[1]).sin(),
                    0.6 * (0.5 * w + phases[2]).sin() + dml,
                    1.2 * (w + phases[3]).sin() + dap,
                )
            }
            Some(ep) => {
                labels[ep.class.channel()][i] = 1;
                let w = TAU * ep.freq_hz * t;
                let (dml, dap) = cue_offset(config, ep.class, plateau(i, ep.start, ep.end, fs));
                (1.5 * (w + phases[0]).sin(), 0.4 * (w + phases[2]).sin() + dml, 0.3 * (w + phases[3]).sin() + dap)
            }
        };
        acc[0][i] = -GRAVITY + v + noise.sample(&mut rng);
        acc[1][i] = ml + noise.sample(&mut rng);
        acc[2][i] = ap + noise.sample(&mut rng);
    }
    if config.kind == DatasetKind::Defog {
        for channel in &mut acc {
            for x in channel.iter_mut() {
                *x /= GRAVITY;
            }
        }
    }
    let record = TimeSeriesRecord {
        id: id.to_string(),
        kind: config.kind,
        time: (0..n as i64).collect(),
        acc,
        labels,
        validity: [vec![1; n], vec![1; n]],
        labeled: true,
        validity_annotated: config.kind == DatasetKind::Defog,
    };
    Ok(Synthesized { record, episodes, decoys, gait_freq_hz: gait })
}

pub fn generate_series(config: &SynthConfig) -> Result<TimeSeriesRecord, SynthError> {
    Ok(generate(config, &format!("{}_{}", config.kind, config.seed))?.record)
}

/// Maximal runs of ones in a binary channel, as `start..end` pairs.
pub fn label_runs(channel: &[u8]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut open = None;
    for (i, &v) in channel.iter().enumerate() {
        match (v != 0, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                runs.push((s, i));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        runs.push((s, channel.len()));
    }
    runs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub seed: u64,
    pub n_episodes: usize,
    pub kind: DatasetKind,
}

/// Record seeds drawn from the dataset seed.
pub fn record_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn record_name(kind: DatasetKind, index: usize) -> String {
    format!("{kind}_{index:04}")
}

/// Writes `n_records` CSV files plus `manifest.csv` into `out_dir`.
pub fn generate_dataset(config: &SynthConfig, n_records: usize, out_dir: &Path) -> Result<Vec<ManifestRow>, SynthError> {
    config.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut rows = Vec::with_capacity(n_records);
    for (i, seed) in record_seeds(config.seed, n_records).into_iter().enumerate() {
        let id = record_name(config.kind, i);
        let synth = generate(&SynthConfig { seed, ..config.clone() }, &id)?;
        let path = out_dir.join(format!("{id}.csv"));
        std::fs::write(&path, synth.record.to_csv()).map_err(io(&path))?;
        rows.push(ManifestRow { id, seed, n_episodes: synth.episodes.len(), kind: config.kind });
    }
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&path, &rows).map_err(io(&path))?;
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> std::io::Result<()> {
    let mut text = String::from("id,seed,n_episodes,kind\n");
    for r in rows {
        text.push_str(&format!("{},{},{},{}\n", r.id, r.seed, r.n_episodes, r.kind));
    }
    std::fs::write(path, text)
}

/// Reads a manifest written by [`generate_dataset`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |i: usize| rec.get(i).ok_or_else(|| format!("line {}: missing field {i}", line + 2));
        let row = ManifestRow {
            id: field(0)?.to_string(),
            seed: field(1)?.parse().map_err(|e| format!("line {}: seed: {e}", line + 2))?,
            n_episodes: field(2)?.parse().map_err(|e| format!("line {}: n_episodes: {e}", line + 2))?,
            kind: field(3)?.parse()?,
        };
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_name_the_key() {
        let cases: Vec<(SynthConfig, &str)> = vec![
            (SynthConfig { event_mix: [0.0428, 0.159, 0.798], ..Default::default() }, "event_mix"),
            (SynthConfig { gait_freq_hz: 6.5, ..Default::default() }, "gait_freq_hz"),
            (SynthConfig { freeze_band_hz: (6.0, 70.0), ..Default::default() }, "freeze_band_hz"),
            (SynthConfig { duration_s: 0.0, ..Default::default() }, "duration_s"),
            (SynthConfig { mean_episode_s: 0.5, ..Default::default() }, "mean_episode_s"),
            (SynthConfig { noise_std: -1.0, ..Default::default() }, "noise_std"),
        ];
        for (config, expected) in cases {
            match config.validate() {
                Err(SynthError::ConfigInvalid { key, .. }) => assert_eq!(key, expected),
                other => panic!("{expected}: {other:?}"),
            }
        }
    }

    #[test]
    fn length_and_determinism() {
        let config = SynthConfig { seed: 5, ..Default::default() };
        let a = generate(&config, "a").unwrap();
        assert_eq!(a.record.len(), 7680);
        assert_eq!(a, generate(&config, "a").unwrap());
        a.record.validate().unwrap();
        let defog = generate(&SynthConfig { kind: DatasetKind::Defog, ..config }, "b").unwrap();
        assert_eq!(defog.record.len(), 6000);
        assert!(defog.record.validity_annotated);
    }

    #[test]
    fn labels_match_episodes() {
        let s = generate(&SynthConfig { seed: 9, duration_s: 120.0, ..Default::default() }, "x").unwrap();
        assert!(!s.episodes.is_empty());
        let mut runs: Vec<(usize, usize, usize)> = (0..3)
            .flat_map(|k| label_runs(&s.record.labels[k]).into_iter().map(move |(a, b)| (a, b, k)))
            .collect();
        runs.sort();
        let expected: Vec<(usize, usize, usize)> =
            s.episodes.iter().map(|e| (e.start, e.end, e.class.channel())).collect();
        assert_eq!(runs, expected);
        for e in &s.episodes {
            assert!((6.0..=8.0).contains(&e.freq_hz));
        }
    }

    #[test]
    fn label_runs_examples() {
        assert_eq!(label_runs(&[0, 1, 1, 0, 1]), vec![(1, 3), (4, 5)]);
        assert!(label_runs(&[0, 0]).is_empty());
        assert_eq!(label_runs(&[1]), vec![(0, 1)]);
    }

    #[test]
    fn turn_artifact_shifts_ml() {
        let base = SynthConfig { seed: 3, duration_s: 300.0, event_mix: [0.0, 0.0, 1.0], noise_std: 0.0, ..Default::default() };
        let plain = generate(&base, "p").unwrap();
        let cued = generate(&SynthConfig { turn_artifact: true, ..base }, "c").unwrap();
        let ep = plain.episodes[0];
        let mid = (ep.start + ep.end) / 2;
        assert!((cued.record.acc[1][mid] - plain.record.acc[1][mid] - 2.0).abs() < 1e-12);
        assert_eq!(cued.record.acc[0], plain.record.acc[0]);
    }
}
