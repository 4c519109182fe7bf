//! Loading of accelerometer recordings in the two dataset dialects.
//!
//! Both dialects share one CSV layout: a header row naming
//! `Time,AccV,AccML,AccAP` plus optional event-label columns
//! `StartHesitation,Turn,Walking` and, for home recordings, the `Valid,Task`
//! validity columns. Column order is irrelevant; lookup is by header name.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header names of the three acceleration channels, in record order.
pub const ACC_COLUMNS: [&str; 3] = ["AccV", "AccML", "AccAP"];
/// Header names of the three event-label channels, in record order.
pub const LABEL_COLUMNS: [&str; 3] = ["StartHesitation", "Turn", "Walking"];
/// Header names of the two validity channels.
pub const VALIDITY_COLUMNS: [&str; 2] = ["Valid", "Task"];
/// File name reserved for the synthetic-data manifest; never loaded as a record.
pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("time must increase by exactly 1: line {line} has {found} after {previous}")]
    NonMonotonicTime { line: usize, previous: i64, found: i64 },
    #[error("series has no samples")]
    EmptySeries,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{} file(s) failed to parse: {}", .failures.len(), summarize_failures(.failures))]
    Parse { failures: Vec<(PathBuf, IngestError)> },
}

fn summarize_failures(failures: &[(PathBuf, IngestError)]) -> String {
    failures
        .iter()
        .map(|(p, e)| format!("{}: {e}", p.display()))
        .collect::<Vec<_>>()
        .join("; ")
}

/// The two recording dialects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// Lab recordings: 128 Hz, m/s².
    Tdcsfog,
    /// Home recordings: 100 Hz, g.
    Defog,
}

impl DatasetKind {
    pub fn sampling_rate_hz(self) -> f64 {
        match self {
            DatasetKind::Tdcsfog => 128.0,
            DatasetKind::Defog => 100.0,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            DatasetKind::Tdcsfog => "m/s^2",
            DatasetKind::Defog => "g",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Tdcsfog => "tdcsfog",
            DatasetKind::Defog => "defog",
        }
    }

    /// Kind implied by a header alone: annotated `Valid`/`Task` columns only
    /// occur in home recordings. Returns `None` when the header is ambiguous.
    pub fn infer_from_header<S: AsRef<str>>(header: &[S]) -> Option<DatasetKind> {
        let has = |name: &str| header.iter().any(|h| h.as_ref().trim() == name);
        if VALIDITY_COLUMNS.iter().all(|c| has(c)) {
            Some(DatasetKind::Defog)
        } else {
            None
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "tdcsfog" => Ok(DatasetKind::Tdcsfog),
            "defog" => Ok(DatasetKind::Defog),
            other => Err(format!("unknown dataset kind `{other}` (expected tdcsfog or defog)")),
        }
    }
}

/// One recording. All channels share the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    pub id: String,
    pub kind: DatasetKind,
    pub time: Vec<i64>,
    /// `[AccV, AccML, AccAP]`.
    pub acc: [Vec<f64>; 3],
    /// `[StartHesitation, Turn, Walking]`, each 0 or 1.
    pub labels: [Vec<u8>; 3],
    /// `[Valid, Task]`, each 0 or 1.
    pub validity: [Vec<u8>; 2],
    /// False when the source file carried no label columns (all-zero labels).
    pub labeled: bool,
    /// False when validity was synthesized as all-ones.
    pub validity_annotated: bool,
}

impl TimeSeriesRecord {
    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self) -> Result<(), IngestError> {
        let n = self.time.len();
        if n == 0 {
            return Err(IngestError::EmptySeries);
        }
        let lens_ok = self.acc.iter().all(|c| c.len() == n)
            && self.labels.iter().all(|c| c.len() == n)
            && self.validity.iter().all(|c| c.len() == n);
        if !lens_ok {
            return Err(IngestError::MalformedRow {
                line: 0,
                reason: "channels differ in length".into(),
            });
        }
        for (i, w) in self.time.windows(2).enumerate() {
            if w[1] != w[0] + 1 {
                return Err(IngestError::NonMonotonicTime {
                    line: i + 3,
                    previous: w[0],
                    found: w[1],
                });
            }
        }
        let binary = |c: &Vec<u8>| c.iter().all(|&v| v <= 1);
        if !self.labels.iter().all(binary) || !self.validity.iter().all(binary) {
            return Err(IngestError::MalformedRow {
                line: 0,
                reason: "label or validity value outside {0, 1}".into(),
            });
        }
        Ok(())
    }

    /// Serializes to the ingest CSV dialect. Label columns are written only for
    /// labeled records and validity columns only when they were annotated, so
    /// re-parsing yields an identical record.
    pub fn to_csv(&self) -> String {
        let mut header: Vec<&str> = vec!["Time"];
        header.extend(ACC_COLUMNS);
        if self.labeled {
            header.extend(LABEL_COLUMNS);
        }
        if self.validity_annotated {
            header.extend(VALIDITY_COLUMNS);
        }
        let mut out = header.join(",");
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&self.time[i].to_string());
            for c in &self.acc {
                out.push(',');
                out.push_str(&c[i].to_string());
            }
            if self.labeled {
                for c in &self.labels {
                    out.push(',');
                    out.push_str(&c[i].to_string());
                }
            }
            if self.validity_annotated {
                for c in &self.validity {
                    out.push(',');
                    out.push_str(&c[i].to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

fn parse_binary(cell: &str) -> Option<u8> {
    match cell.trim() {
        "0" | "0.0" => Some(0),
        "1" | "1.0" => Some(1),
        s if s.eq_ignore_ascii_case("false") => Some(0),
        s if s.eq_ignore_ascii_case("true") => Some(1),
        _ => None,
    }
}

/// Parses one CSV recording. Missing label columns yield an unlabeled record;
/// missing validity columns yield all-ones validity. For lab recordings the
/// validity channels are always all-ones.
pub fn parse_series(csv_text: &str, kind: DatasetKind, id: &str) -> Result<TimeSeriesRecord, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(csv_text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| IngestError::MalformedRow { line: 1, reason: e.to_string() })?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);

    let time_col = find("Time").ok_or_else(|| IngestError::MissingColumn("Time".into()))?;
    let mut acc_cols = [0usize; 3];
    for (slot, name) in acc_cols.iter_mut().zip(ACC_COLUMNS) {
        *slot = find(name).ok_or_else(|| IngestError::MissingColumn(name.into()))?;
    }
    let label_cols: Vec<Option<usize>> = LABEL_COLUMNS.iter().map(|n| find(n)).collect();
    let labeled = label_cols.iter().any(Option::is_some);
    if labeled {
        if let Some(i) = label_cols.iter().position(Option::is_none) {
            return Err(IngestError::MissingColumn(LABEL_COLUMNS[i].into()));
        }
    }
    let validity_cols: Vec<Option<usize>> = VALIDITY_COLUMNS.iter().map(|n| find(n)).collect();
    let validity_annotated = kind == DatasetKind::Defog && validity_cols.iter().all(Option::is_some);

    let mut rec = TimeSeriesRecord {
        id: id.to_string(),
        kind,
        time: Vec::new(),
        acc: Default::default(),
        labels: Default::default(),
        validity: Default::default(),
        labeled,
        validity_annotated,
    };

    for (row_idx, row) in reader.records().enumerate() {
        let line = row_idx + 2;
        let row = row.map_err(|e| IngestError::MalformedRow { line, reason: e.to_string() })?;
        let cell = |col: usize| row.get(col).unwrap_or("");
        let malformed = |col: usize| IngestError::MalformedRow {
            line,
            reason: format!("cannot parse `{}` in column {}", cell(col), header[col]),
        };

        let t: i64 = cell(time_col).parse().map_err(|_| malformed(time_col))?;
        if let Some(&prev) = rec.time.last() {
            if t != prev + 1 {
                return Err(IngestError::NonMonotonicTime { line, previous: prev, found: t });
            }
        }
        rec.time.push(t);
        for (ch, &col) in acc_cols.iter().enumerate() {
            let v: f64 = cell(col).parse().map_err(|_| malformed(col))?;
            if !v.is_finite() {
                return Err(malformed(col));
            }
            rec.acc[ch].push(v);
        }
        for (ch, col) in label_cols.iter().enumerate() {
            let v = match col {
                Some(col) => parse_binary(cell(*col)).ok_or_else(|| malformed(*col))?,
                None => 0,
            };
            rec.labels[ch].push(v);
        }
        for (ch, col) in validity_cols.iter().enumerate() {
            let v = match col {
                Some(col) if validity_annotated => parse_binary(cell(*col)).ok_or_else(|| malformed(*col))?,
                _ => 1,
            };
            rec.validity[ch].push(v);
        }
    }

    if rec.time.is_empty() {
        return Err(IngestError::EmptySeries);
    }
    Ok(rec)
}

/// Lists the record files of a directory: every `*.csv` except the manifest,
/// sorted by file stem.
pub fn list_record_files(root: &Path) -> Result<Vec<PathBuf>, IngestError> {
    let io_err = |source| IngestError::Io { path: root.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(root).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        let is_csv = path.extension().is_some_and(|e| e == "csv");
        let is_manifest = path.file_name().is_some_and(|n| n == MANIFEST_FILE);
        if path.is_file() && is_csv && !is_manifest {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_stem().cmp(&b.file_stem()));
    Ok(files)
}

pub fn record_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads every record file in `root` (see [`list_record_files`]), ordered by
/// id. Any file that cannot be read or parsed is reported in an aggregate
/// [`IngestError::Parse`].
pub fn load_dataset(root: &Path, kind: DatasetKind) -> Result<Vec<TimeSeriesRecord>, IngestError> {
    load_dataset_with(root, |_, _| kind)
}

/// Like [`load_dataset`], but the kind of each file is chosen by `kind_of`
/// from its id and header.
pub fn load_dataset_with<F>(root: &Path, kind_of: F) -> Result<Vec<TimeSeriesRecord>, IngestError>
where
    F: Fn(&str, &[String]) -> DatasetKind,
{
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for path in list_record_files(root)? {
        let id = record_id(&path);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(source) => {
                failures.push((path.clone(), IngestError::Io { path, source }));
                continue;
            }
        };
        let header: Vec<String> = text
            .lines()
            .next()
            .unwrap_or("")
            .split(',')
            .map(|s| s.trim().to_string())
            .collect();
        let kind = kind_of(&id, &header);
        match parse_series(&text, kind, &id) {
            Ok(r) => records.push(r),
            Err(e) => failures.push((path, e)),
        }
    }
    if failures.is_empty() {
        Ok(records)
    } else {
        Err(IngestError::Parse { failures })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TDCS: &str = "Time,AccV,AccML,AccAP,StartHesitation,Turn,Walking\n0,-9.8,0.1,0.2,0,1,0\n1,-9.7,0.1,0.3,0,1,0\n";

    #[test]
    fn parses_documented_schema() {
        let r = parse_series(TDCS, DatasetKind::Tdcsfog, "a").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.labels[1], vec![1, 1]);
        assert_eq!(r.labels[0], vec![0, 0]);
        assert_eq!(r.validity, [vec![1, 1], vec![1, 1]]);
        assert_eq!(r.acc[0], vec![-9.8, -9.7]);
        assert!(r.labeled);
        assert!(!r.validity_annotated);
    }

    #[test]
    fn missing_acc_column() {
        let text = "Time,AccV,AccAP\n0,1,2\n";
        match parse_series(text, DatasetKind::Tdcsfog, "x") {
            Err(IngestError::MissingColumn(c)) => assert_eq!(c, "AccML"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn defog_validity_columns() {
        let text = "Time,AccV,AccML,AccAP,StartHesitation,Turn,Walking,Valid,Task\n0,-1,0,0,0,0,0,1,1\n1,-1,0,0,0,0,0,1,0\n";
        let r = parse_series(text, DatasetKind::Defog, "d").unwrap();
        assert_eq!(r.validity[0], vec![1, 1]);
        assert_eq!(r.validity[1], vec![1, 0]);
        assert!(r.validity_annotated);
    }

    #[test]
    fn boolean_validity_cells() {
        let text = "Time,AccV,AccML,AccAP,Valid,Task\n0,-1,0,0,True,False\n";
        let r = parse_series(text, DatasetKind::Defog, "d").unwrap();
        assert_eq!(r.validity, [vec![1], vec![0]]);
        assert!(!r.labeled);
    }

    #[test]
    fn time_gap_rejected() {
        let text = "Time,AccV,AccML,AccAP\n0,1,2,3\n2,1,2,3\n";
        assert!(matches!(
            parse_series(text, DatasetKind::Tdcsfog, "x"),
            Err(IngestError::NonMonotonicTime { previous: 0, found: 2, .. })
        ));
    }

    #[test]
    fn empty_and_malformed() {
        let header_only = "Time,AccV,AccML,AccAP\n";
        assert!(matches!(parse_series(header_only, DatasetKind::Tdcsfog, "x"), Err(IngestError::EmptySeries)));
        let bad = "Time,AccV,AccML,AccAP\n0,abc,2,3\n";
        assert!(matches!(
            parse_series(bad, DatasetKind::Tdcsfog, "x"),
            Err(IngestError::MalformedRow { line: 2, .. })
        ));
        let arity = "Time,AccV,AccML,AccAP\n0,1,2\n";
        assert!(matches!(parse_series(arity, DatasetKind::Tdcsfog, "x"), Err(IngestError::MalformedRow { .. })));
        let label = "Time,AccV,AccML,AccAP,StartHesitation,Turn,Walking\n0,1,2,3,0,2,0\n";
        assert!(matches!(parse_series(label, DatasetKind::Tdcsfog, "x"), Err(IngestError::MalformedRow { .. })));
    }

    #[test]
    fn unlabeled_file_and_crlf() {
        let text = "AccAP,Time,AccML,AccV\r\n3,0,2,1\r\n";
        let r = parse_series(text, DatasetKind::Tdcsfog, "u").unwrap();
        assert!(!r.labeled);
        assert_eq!(r.acc, [vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(r.labels, [vec![0], vec![0], vec![0]]);
    }

    #[test]
    fn tdcsfog_ignores_validity_columns() {
        let text = "Time,AccV,AccML,AccAP,Valid,Task\n0,1,2,3,0,0\n";
        let r = parse_series(text, DatasetKind::Tdcsfog, "t").unwrap();
        assert_eq!(r.validity, [vec![1], vec![1]]);
    }

    #[test]
    fn kind_properties() {
        assert_eq!(DatasetKind::Tdcsfog.sampling_rate_hz(), 128.0);
        assert_eq!(DatasetKind::Defog.sampling_rate_hz(), 100.0);
        assert_eq!(DatasetKind::Defog.unit(), "g");
        assert_eq!("DEFOG".parse::<DatasetKind>().unwrap(), DatasetKind::Defog);
        assert_eq!(DatasetKind::infer_from_header(&["Time", "Valid", "Task"]), Some(DatasetKind::Defog));
        assert_eq!(DatasetKind::infer_from_header(&["Time", "AccV"]), None);
    }
}
