use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{DatasetKind, TimeSeriesRecord};
use crate::model::{forward, ModelConfig, ModelError, ModelParams};
use crate::nncore::SeededRng;
use crate::preprocess::{extract_blocks, normalize, pad_series, stitch_predictions, PreprocessError};

pub const CLASS_NAMES: [&str; 3] = ["start_hesitation", "turn", "walking"];
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("every class average precision is undefined")]
    AllUndefined,
    #[error("confidence at index {index} is NaN")]
    NanConfidence { index: usize },
    #[error("threshold {0} is outside (0, 1)")]
    ThresholdOutOfRange(f64),
    #[error("record `{id}` is {found}, expected {expected}")]
    MixedDatasetKind { id: String, expected: DatasetKind, found: DatasetKind },
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), EvalError> {
    if expected == found {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { what, expected, found })
    }
}

/// Precision at each positive rank, averaged over the positives.
///
/// Only samples with a nonzero mask take part. They are ranked by descending
/// confidence, and equal confidences keep their original order. Returns
/// `None` when no positive survives the mask.
pub fn average_precision(conf: &[f64], labels: &[u8], mask: &[u8]) -> Result<Option<f64>, EvalError> {
    check_len("labels", conf.len(), labels.len())?;
    check_len("mask", conf.len(), mask.len())?;
    if let Some(index) = conf.iter().position(|c| c.is_nan()) {
        return Err(EvalError::NanConfidence { index });
    }
    let mut order: Vec<usize> = (0..conf.len()).filter(|&i| mask[i] != 0).collect();
    // Stable sort, so ties stay in index order.
    order.sort_by(|&a, &b| conf[b].partial_cmp(&conf[a]).unwrap_or(Ordering::Equal));

    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok((hits > 0).then(|| sum / hits as f64))
}

/// Mean over the defined entries plus the number of undefined ones skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanAp {
    pub value: f64,
    pub skipped: usize,
}

pub fn mean_average_precision(ap: &[Option<f64>]) -> Result<MeanAp, EvalError> {
    let defined: Vec<f64> = ap.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(EvalError::AllUndefined);
    }
    Ok(MeanAp { value: defined.iter().sum::<f64>() / defined.len() as f64, skipped: ap.len() - defined.len() })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn metrics(&self) -> ConfusionMetrics {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        ConfusionMetrics {
            counts: *self,
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            specificity: ratio(self.tn, self.tn + self.fp),
            f1,
        }
    }
}

/// Threshold metrics; `None` marks a 0/0 ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn check_threshold(threshold: f64) -> Result<(), EvalError> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(EvalError::ThresholdOutOfRange(threshold))
    }
}

pub fn confusion_counts(
    conf: &[f64],
    labels: &[u8],
    mask: &[u8],
    threshold: f64,
) -> Result<ConfusionCounts, EvalError> {
    check_len("labels", conf.len(), labels.len())?;
    check_len("mask", conf.len(), mask.len())?;
    check_threshold(threshold)?;
    let mut c = ConfusionCounts::default();
    for i in (0..conf.len()).filter(|&i| mask[i] != 0) {
        match (conf[i] >= threshold, labels[i] != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn confusion_metrics(
    conf: &[f64],
    labels: &[u8],
    mask: &[u8],
    threshold: f64,
) -> Result<ConfusionMetrics, EvalError> {
    Ok(confusion_counts(conf, labels, mask, threshold)?.metrics())
}

/// Unweighted mean of each metric over the classes where it is defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMetrics {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// `[StartHesitation, Turn, Walking]`.
    pub ap_per_class: [Option<f64>; 3],
    pub map: Option<f64>,
    pub skipped_classes: usize,
    pub threshold: f64,
    /// Confusion metrics over every (patch, class) pair.
    pub pooled: ConfusionMetrics,
    pub per_class: [ConfusionMetrics; 3],
    pub macro_avg: MacroMetrics,
    /// Number of masked-in patches.
    pub n_masked: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| x.to_string())
}

impl MetricsReport {
    /// Flat machine-readable pairs. Threshold metrics are the pooled ones.
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("ap_start_hesitation", fmt_opt(self.ap_per_class[0])),
            ("ap_turn", fmt_opt(self.ap_per_class[1])),
            ("ap_walking", fmt_opt(self.ap_per_class[2])),
            ("map", fmt_opt(self.map)),
            ("accuracy", fmt_opt(self.pooled.accuracy)),
            ("precision", fmt_opt(self.pooled.precision)),
            ("recall", fmt_opt(self.pooled.recall)),
            ("specificity", fmt_opt(self.pooled.specificity)),
            ("f1", fmt_opt(self.pooled.f1)),
            ("threshold", self.threshold.to_string()),
            ("n_masked", self.n_masked.to_string()),
        ]
    }

    pub fn write_key_values<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (k, v) in self.key_values() {
            writeln!(out, "{k} = {v}")?;
        }
        Ok(())
    }

    pub fn table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<18}{:>8}{:>10}{:>11}{:>9}{:>13}{:>8}", "class", "ap", "accuracy", "precision", "recall", "specificity", "f1");
        let mut row = |name: &str, ap: Option<f64>, m: MacroMetrics| {
            let _ = writeln!(
                s,
                "{:<18}{:>8}{:>10}{:>11}{:>9}{:>13}{:>8}",
                name,
                cell(ap),
                cell(m.accuracy),
                cell(m.precision),
                cell(m.recall),
                cell(m.specificity),
                cell(m.f1)
            );
        };
        let as_macro = |m: &ConfusionMetrics| MacroMetrics {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            specificity: m.specificity,
            f1: m.f1,
        };
        for (k, name) in CLASS_NAMES.iter().enumerate() {
            row(name, self.ap_per_class[k], as_macro(&self.per_class[k]));
        }
        row("pooled", self.map, as_macro(&self.pooled));
        row("macro", self.map, self.macro_avg);
        let _ = writeln!(s, "threshold {}  masked-in patches {}", self.threshold, self.n_masked);
        s
    }
}

/// Scores per-patch confidences against patch labels.
pub fn score_patches(
    conf: &[[f64; 3]],
    labels: &[[u8; 3]],
    mask: &[u8],
    threshold: f64,
) -> Result<MetricsReport, EvalError> {
    check_len("labels", conf.len(), labels.len())?;
    check_len("mask", conf.len(), mask.len())?;
    check_threshold(threshold)?;
    let mut ap_per_class = [None; 3];
    let mut counts = [ConfusionCounts::default(); 3];
    for k in 0..3 {
        let c: Vec<f64> = conf.iter().map(|r| r[k]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[k]).collect();
        ap_per_class[k] = average_precision(&c, &l, mask)?;
        counts[k] = confusion_counts(&c, &l, mask, threshold)?;
    }
    let per_class = counts.map(|c| c.metrics());
    let pooled = counts[0].merge(&counts[1]).merge(&counts[2]).metrics();
    let (map, skipped_classes) = match mean_average_precision(&ap_per_class) {
        Ok(m) => (Some(m.value), m.skipped),
        Err(_) => (None, 3),
    };
    let macro_avg = MacroMetrics {
        accuracy: mean_defined(per_class.iter().map(|m| m.accuracy)),
        precision: mean_defined(per_class.iter().map(|m| m.precision)),
        recall: mean_defined(per_class.iter().map(|m| m.recall)),
        specificity: mean_defined(per_class.iter().map(|m| m.specificity)),
        f1: mean_defined(per_class.iter().map(|m| m.f1)),
    };
    Ok(MetricsReport {
        ap_per_class,
        map,
        skipped_classes,
        threshold,
        pooled,
        per_class,
        macro_avg,
        n_masked: mask.iter().filter(|&&m| m != 0).count(),
    })
}

/// Per-patch model output for one record with padding patches removed.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPrediction {
    pub record_id: String,
    pub confidences: Vec<[f64; 3]>,
    pub targets: Vec<[u8; 3]>,
    pub mask: Vec<u8>,
    /// Record timestamp at the first sample of each patch.
    pub patch_start_time: Vec<i64>,
}

/// Normalizes, tiles into non-overlapping blocks, runs the model in eval
/// mode and stitches the per-patch confidences back together.
pub fn predict_record(
    record: &TimeSeriesRecord,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<RecordPrediction, EvalError> {
    let (normalized, _) = normalize(record);
    let padded = pad_series(&normalized, config.block_size);
    let blocks = extract_blocks(&padded, config.block_size, config.block_size, config.patch_size)?;
    let mut rng = SeededRng::new(0);
    let mut scored = Vec::with_capacity(blocks.len());
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for block in blocks {
        let conf = forward(&block, params, config, &mut rng, false)?;
        targets.extend_from_slice(&block.targets);
        mask.extend(block.mask.iter().map(|&m| u8::from(m > 0.0)));
        scored.push((block, conf));
    }
    let stitched = stitch_predictions(&scored)?;
    let keep = stitched.padded.iter().take_while(|&&p| !p).count();
    let patch_start_time = (0..keep).map(|p| padded.record.time[p * config.patch_size]).collect();
    targets.truncate(keep);
    mask.truncate(keep);
    let mut confidences = stitched.confidences;
    confidences.truncate(keep);
    Ok(RecordPrediction { record_id: record.id.clone(), confidences, targets, mask, patch_start_time })
}

fn check_single_kind(records: &[TimeSeriesRecord]) -> Result<(), EvalError> {
    if let Some(first) = records.first() {
        if let Some(r) = records.iter().find(|r| r.kind != first.kind) {
            return Err(EvalError::MixedDatasetKind { id: r.id.clone(), expected: first.kind, found: r.kind });
        }
    }
    Ok(())
}

/// Predicts every record, optionally across `threads` workers. Results keep
/// record order, so the outcome does not depend on the thread count.
pub fn predict_dataset(
    records: &[TimeSeriesRecord],
    params: &ModelParams,
    config: &ModelConfig,
    threads: Option<usize>,
) -> Result<Vec<RecordPrediction>, EvalError> {
    check_single_kind(records)?;
    match threads {
        Some(n) if n > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
            pool.install(|| records.par_iter().map(|r| predict_record(r, params, config)).collect())
        }
        _ => records.iter().map(|r| predict_record(r, params, config)).collect(),
    }
}

/// Pools every record's patches and scores them together.
pub fn score_predictions(predictions: &[RecordPrediction], threshold: f64) -> Result<MetricsReport, EvalError> {
    let conf: Vec<[f64; 3]> = predictions.iter().flat_map(|p| p.confidences.iter().copied()).collect();
    let labels: Vec<[u8; 3]> = predictions.iter().flat_map(|p| p.targets.iter().copied()).collect();
    let mask: Vec<u8> = predictions.iter().flat_map(|p| p.mask.iter().copied()).collect();
    score_patches(&conf, &labels, &mask, threshold)
}

pub fn evaluate(
    records: &[TimeSeriesRecord],
    params: &ModelParams,
    config: &ModelConfig,
    threshold: f64,
    threads: Option<usize>,
) -> Result<MetricsReport, EvalError> {
    check_threshold(threshold)?;
    score_predictions(&predict_dataset(records, params, config, threads)?, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1], &[1, 1, 1]).unwrap().unwrap();
        assert!(close(ap, (1.0 + 2.0 / 3.0) / 2.0));
        assert_eq!(average_precision(&[0.3, 0.2, 0.9], &[1, 0, 1], &[1, 1, 1]).unwrap(), Some(1.0));
        assert_eq!(average_precision(&[0.3, 0.2], &[0, 0], &[1, 1]).unwrap(), None);
        assert_eq!(average_precision(&[0.3, 0.2], &[1, 0], &[0, 1]).unwrap(), None);
        assert!(matches!(average_precision(&[0.3], &[1, 0], &[1, 1]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(average_precision(&[f64::NAN], &[1], &[1]), Err(EvalError::NanConfidence { index: 0 })));
    }

    #[test]
    fn ap_ties_keep_index_order() {
        // Equal confidences: the positive at index 1 ranks second.
        let ap = average_precision(&[0.5, 0.5, 0.5], &[0, 1, 0], &[1, 1, 1]).unwrap().unwrap();
        assert!(close(ap, 0.5));
        let ap = average_precision(&[0.5, 0.5, 0.5], &[1, 0, 0], &[1, 1, 1]).unwrap().unwrap();
        assert!(close(ap, 1.0));
        let ap = average_precision(&[-0.0, 0.0], &[0, 1], &[1, 1]).unwrap().unwrap();
        assert!(close(ap, 0.5));
    }

    #[test]
    fn map_examples() {
        let m = mean_average_precision(&[Some(1.0), None, Some(0.0)]).unwrap();
        assert_eq!(m, MeanAp { value: 0.5, skipped: 1 });
        assert!(matches!(mean_average_precision(&[None, None]), Err(EvalError::AllUndefined)));
        assert!(matches!(mean_average_precision(&[]), Err(EvalError::AllUndefined)));
    }

    #[test]
    fn confusion_examples() {
        let m = confusion_metrics(&[0.9, 0.1, 0.6, 0.5], &[1, 0, 0, 1], &[1, 1, 1, 1], 0.5).unwrap();
        assert_eq!(m.counts, ConfusionCounts { tp: 2, fp: 1, tn: 1, fn_: 0 });
        assert!(close(m.accuracy.unwrap(), 0.75));
        assert!(close(m.precision.unwrap(), 2.0 / 3.0));
        assert!(close(m.recall.unwrap(), 1.0));
        assert!(close(m.specificity.unwrap(), 0.5));
        assert!(close(m.f1.unwrap(), 0.8));

        let none = confusion_metrics(&[0.1, 0.2], &[0, 0], &[1, 1], 0.5).unwrap();
        assert_eq!(none.precision, None);
        assert_eq!(none.recall, None);
        assert_eq!(none.f1, None);
        assert_eq!(none.specificity, Some(1.0));
        let empty = confusion_metrics(&[0.1], &[0], &[0], 0.5).unwrap();
        assert_eq!(empty.accuracy, None);
        assert!(matches!(confusion_metrics(&[0.1], &[0], &[1], 1.0), Err(EvalError::ThresholdOutOfRange(_))));
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let labels = vec![[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 0, 0]];
        let conf: Vec<[f64; 3]> = labels.iter().map(|r| r.map(f64::from)).collect();
        let r = score_patches(&conf, &labels, &[1; 5], 0.5).unwrap();
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.ap_per_class, [Some(1.0); 3]);
        for v in [r.pooled.accuracy, r.pooled.precision, r.pooled.recall, r.pooled.specificity, r.pooled.f1] {
            assert_eq!(v, Some(1.0));
        }
        assert_eq!(r.n_masked, 5);
        assert_eq!(r.skipped_classes, 0);
    }

    #[test]
    fn report_key_values() {
        let r = score_patches(&[[0.9, 0.1, 0.2]], &[[1, 0, 0]], &[1], 0.5).unwrap();
        let keys: Vec<&str> = r.key_values().iter().map(|(k, _)| *k).collect();
        assert_eq!(
            keys,
            [
                "ap_start_hesitation", "ap_turn", "ap_walking", "map", "accuracy", "precision", "recall",
                "specificity", "f1", "threshold", "n_masked"
            ]
        );
        let kv = r.key_values();
        assert_eq!(kv[1].1, "undefined");
        assert_eq!(kv[3].1, "1");
        let mut buf = Vec::new();
        r.write_key_values(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("ap_start_hesitation = 1\n"));
        assert!(r.table().contains("pooled"));
    }
}
