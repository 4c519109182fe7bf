//! Series preparation: per-record standardization, patch reduction of
//! targets, padding to a block multiple, overlapping block extraction, and the
//! inverse stitching of per-block predictions.

use std::io::Write;

use thiserror::Error;

use crate::ingest::TimeSeriesRecord;

/// Standard deviations below this are replaced by a divisor of 1.
pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("length {len} is not divisible by {divisor}")]
    NotDivisible { len: usize, divisor: usize },
    #[error("invalid block stride {stride} for block size {block_size}")]
    InvalidStride { stride: usize, block_size: usize },
    #[error("patch {patch} is not covered by any block")]
    CoverageGap { patch: usize },
    #[error("block starting at sample {start} is not aligned to patch size {patch_size}")]
    MisalignedBlock { start: usize, patch_size: usize },
    #[error("blocks come from different records (`{0}` and `{1}`)")]
    RecordMismatch(String, String),
    #[error("block confidences have {found} rows, expected {expected}")]
    ConfidenceShape { expected: usize, found: usize },
    #[error("no blocks to stitch")]
    NoBlocks,
}

/// Per-channel population statistics of the acceleration channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardizes each acceleration channel with the record's own mean and
/// population standard deviation.
pub fn normalize(record: &TimeSeriesRecord) -> (TimeSeriesRecord, NormalizationStats) {
    let mut out = record.clone();
    let mut stats = NormalizationStats { mean: [0.0; 3], std: [0.0; 3] };
    for ch in 0..3 {
        let (mean, std) = mean_std(&record.acc[ch]);
        let divisor = if std < STD_EPSILON { 1.0 } else { std };
        for v in out.acc[ch].iter_mut() {
            *v = (*v - mean) / divisor;
        }
        stats.mean[ch] = mean;
        stats.std[ch] = std;
    }
    (out, stats)
}

fn check_divisible(len: usize, patch_size: usize) -> Result<(), PreprocessError> {
    if patch_size == 0 || len % patch_size != 0 {
        return Err(PreprocessError::NotDivisible { len, divisor: patch_size });
    }
    Ok(())
}

/// Max over each patch of one binary channel.
pub fn reduce_max(channel: &[u8], patch_size: usize) -> Result<Vec<u8>, PreprocessError> {
    check_divisible(channel.len(), patch_size)?;
    Ok(channel.chunks(patch_size).map(|p| p.iter().copied().max().unwrap_or(0)).collect())
}

/// Min over each patch of one binary channel.
pub fn reduce_min(channel: &[u8], patch_size: usize) -> Result<Vec<u8>, PreprocessError> {
    check_divisible(channel.len(), patch_size)?;
    Ok(channel.chunks(patch_size).map(|p| p.iter().copied().min().unwrap_or(0)).collect())
}

/// Patch-wise max reduction of event-label channels (channel-major).
pub fn reduce_targets(labels: &[Vec<u8>], patch_size: usize) -> Result<Vec<Vec<u8>>, PreprocessError> {
    labels.iter().map(|c| reduce_max(c, patch_size)).collect()
}

/// Patch-wise min reduction of validity channels: a patch is valid only if
/// every sample in it is.
pub fn reduce_validity(validity: &[Vec<u8>], patch_size: usize) -> Result<Vec<Vec<u8>>, PreprocessError> {
    validity.iter().map(|c| reduce_min(c, patch_size)).collect()
}

/// A record padded at the end to a multiple of the block size.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedSeries {
    pub record: TimeSeriesRecord,
    /// 1 on original samples, 0 on padding.
    pub padding_mask: Vec<u8>,
    pub original_len: usize,
}

impl PaddedSeries {
    pub fn len(&self) -> usize {
        self.padding_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.padding_mask.is_empty()
    }

    /// Per-sample loss weight: Valid × Task × not-padding.
    pub fn sample_mask(&self) -> Vec<u8> {
        let v = &self.record.validity;
        (0..self.len()).map(|i| v[0][i] * v[1][i] * self.padding_mask[i]).collect()
    }
}

/// Pads features, labels, and validity with zeros up to the smallest multiple
/// of `block_size`. Time keeps counting through the padding.
pub fn pad_series(record: &TimeSeriesRecord, block_size: usize) -> PaddedSeries {
    assert!(block_size >= 1, "block_size must be positive");
    let n = record.len();
    let padded_len = n.div_ceil(block_size).max(1) * block_size;
    let extra = padded_len - n;
    let mut rec = record.clone();
    let last_time = rec.time.last().copied().unwrap_or(-1);
    rec.time.extend((1..=extra as i64).map(|k| last_time + k));
    for c in rec.acc.iter_mut() {
        c.resize(padded_len, 0.0);
    }
    for c in rec.labels.iter_mut() {
        c.resize(padded_len, 0);
    }
    for c in rec.validity.iter_mut() {
        c.resize(padded_len, 0);
    }
    let mut padding_mask = vec![1u8; n];
    padding_mask.resize(padded_len, 0);
    PaddedSeries { record: rec, padding_mask, original_len: n }
}

/// A fixed-length window of a padded series.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub record_id: String,
    /// First sample index into the padded series.
    pub start: usize,
    /// One past the last sample index.
    pub end: usize,
    pub patch_size: usize,
    /// Row-major `[block_size × 3]`.
    pub features: Vec<f64>,
    /// Per-patch reduced targets `[StartHesitation, Turn, Walking]`.
    pub targets: Vec<[u8; 3]>,
    /// Per-patch min of Valid × Task × not-padding.
    pub mask: Vec<f64>,
    /// True for patches containing at least one padding sample.
    pub padded: Vec<bool>,
}

impl Block {
    pub fn block_size(&self) -> usize {
        self.end - self.start
    }

    pub fn num_patches(&self) -> usize {
        self.targets.len()
    }
}

/// Block start offsets: `0, stride, 2·stride, …`, plus a final block ending
/// exactly at `padded_len` when the stride grid does not reach it.
pub fn block_starts(padded_len: usize, block_size: usize, stride: usize) -> Result<Vec<usize>, PreprocessError> {
    if stride == 0 || stride > block_size {
        return Err(PreprocessError::InvalidStride { stride, block_size });
    }
    check_divisible(padded_len, block_size)?;
    let mut starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|s| s + block_size <= padded_len)
        .collect();
    let last = padded_len - block_size;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(starts)
}

/// Cuts a padded series into (possibly overlapping) blocks.
pub fn extract_blocks(
    padded: &PaddedSeries,
    block_size: usize,
    stride: usize,
    patch_size: usize,
) -> Result<Vec<Block>, PreprocessError> {
    check_divisible(block_size, patch_size)?;
    let starts = block_starts(padded.len(), block_size, stride)?;
    let rec = &padded.record;
    let sample_mask = padded.sample_mask();
    let num_patches = block_size / patch_size;

    let blocks = starts
        .into_iter()
        .map(|start| {
            let end = start + block_size;
            let mut features = Vec::with_capacity(block_size * 3);
            for i in start..end {
                features.extend(rec.acc.iter().map(|c| c[i]));
            }
            let mut targets = vec![[0u8; 3]; num_patches];
            let mut mask = vec![0.0; num_patches];
            let mut pad_flags = vec![false; num_patches];
            for p in 0..num_patches {
                let range = start + p * patch_size..start + (p + 1) * patch_size;
                for (ch, c) in rec.labels.iter().enumerate() {
                    targets[p][ch] = c[range.clone()].iter().copied().max().unwrap_or(0);
                }
                mask[p] = f64::from(sample_mask[range.clone()].iter().copied().min().unwrap_or(0));
                pad_flags[p] = padded.padding_mask[range].contains(&0);
            }
            Block {
                record_id: rec.id.clone(),
                start,
                end,
                patch_size,
                features,
                targets,
                mask,
                padded: pad_flags,
            }
        })
        .collect();
    Ok(blocks)
}

/// Full-length per-patch confidences reassembled from blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Stitched {
    pub confidences: Vec<[f64; 3]>,
    /// True for patches containing padding.
    pub padded: Vec<bool>,
}

/// Averages overlapping per-block confidences back onto the global patch grid.
pub fn stitch_predictions(blocks: &[(Block, Vec<[f64; 3]>)]) -> Result<Stitched, PreprocessError> {
    let (first, _) = blocks.first().ok_or(PreprocessError::NoBlocks)?;
    let patch_size = first.patch_size;
    let total_len = blocks.iter().map(|(b, _)| b.end).max().unwrap_or(0);
    check_divisible(total_len, patch_size)?;
    let num_patches = total_len / patch_size;

    let mut sums = vec![[0.0f64; 3]; num_patches];
    let mut counts = vec![0usize; num_patches];
    let mut padded = vec![false; num_patches];
    for (block, conf) in blocks {
        if block.record_id != first.record_id {
            return Err(PreprocessError::RecordMismatch(first.record_id.clone(), block.record_id.clone()));
        }
        if block.patch_size != patch_size || block.start % patch_size != 0 {
            return Err(PreprocessError::MisalignedBlock { start: block.start, patch_size });
        }
        if conf.len() != block.num_patches() {
            return Err(PreprocessError::ConfidenceShape { expected: block.num_patches(), found: conf.len() });
        }
        let offset = block.start / patch_size;
        for (p, row) in conf.iter().enumerate() {
            for ch in 0..3 {
                sums[offset + p][ch] += row[ch];
            }
            counts[offset + p] += 1;
            padded[offset + p] |= block.padded[p];
        }
    }
    let mut confidences = Vec::with_capacity(num_patches);
    for (p, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
        if count == 0 {
            return Err(PreprocessError::CoverageGap { patch: p });
        }
        let n = count as f64;
        confidences.push([sum[0] / n, sum[1] / n, sum[2] / n]);
    }
    Ok(Stitched { confidences, padded })
}

/// Writes one row per patch: `record_id,patch_index,start_hesitation,turn,walking,mask`.
pub fn write_blocks_csv<W: Write>(mut out: W, blocks: &[Block]) -> std::io::Result<()> {
    writeln!(out, "record_id,patch_index,start_hesitation,turn,walking,mask")?;
    for b in blocks {
        let offset = b.start / b.patch_size.max(1);
        for (p, (t, m)) in b.targets.iter().zip(&b.mask).enumerate() {
            writeln!(out, "{},{},{},{},{},{}", b.record_id, offset + p, t[0], t[1], t[2], m)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::DatasetKind;

    fn record(acc: Vec<f64>) -> TimeSeriesRecord {
        let n = acc.len();
        TimeSeriesRecord {
            id: "r".into(),
            kind: DatasetKind::Tdcsfog,
            time: (0..n as i64).collect(),
            acc: [acc.clone(), acc.clone(), acc],
            labels: [vec![0; n], vec![0; n], vec![0; n]],
            validity: [vec![1; n], vec![1; n]],
            labeled: true,
            validity_annotated: false,
        }
    }

    // Two-pass brute-force standardization used as the oracle.
    fn oracle_standardize(x: &[f64]) -> Vec<f64> {
        let mut sum = 0.0;
        for v in x {
            sum += v;
        }
        let mean = sum / x.len() as f64;
        let mut ss = 0.0;
        for v in x {
            ss += (v - mean).powi(2);
        }
        let std = (ss / x.len() as f64).sqrt();
        x.iter().map(|v| (v - mean) / std).collect()
    }

    #[test]
    fn normalize_three_points() {
        let (n, stats) = normalize(&record(vec![0.0, 1.0, 2.0]));
        assert!((stats.mean[0] - 1.0).abs() < 1e-15);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((stats.std[0] - 0.81650).abs() < 1e-5);
        let oracle = oracle_standardize(&[0.0, 1.0, 2.0]);
        for (a, b) in n.acc[0].iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((n.acc[0][0] + 1.22474).abs() < 1e-5);
        assert_eq!(n.acc[0][1], 0.0);
    }

    #[test]
    fn normalize_constant_channel() {
        let (n, _) = normalize(&record(vec![5.0, 5.0, 5.0]));
        assert_eq!(n.acc[0], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let (once, _) = normalize(&record(vec![3.0, -1.0, 4.0, 1.5, 9.0]));
        let (twice, stats) = normalize(&once);
        assert!(stats.mean[0].abs() < 1e-12);
        assert!((stats.std[0] - 1.0).abs() < 1e-12);
        for (a, b) in once.acc[0].iter().zip(&twice.acc[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_examples() {
        assert_eq!(reduce_max(&[0, 1, 0, 0, 0, 0, 1, 1], 4).unwrap(), vec![1, 1]);
        assert_eq!(reduce_max(&[0; 8], 4).unwrap(), vec![0, 0]);
        assert_eq!(reduce_max(&[1, 0, 0, 0, 0, 1], 2).unwrap(), vec![1, 0, 1]);
        assert_eq!(reduce_min(&[1, 0, 1, 1], 2).unwrap(), vec![0, 1]);
        assert_eq!(reduce_max(&[0, 1, 0], 2), Err(PreprocessError::NotDivisible { len: 3, divisor: 2 }));
        let t = reduce_targets(&[vec![0, 1, 0, 0], vec![1, 1, 0, 0]], 2).unwrap();
        assert_eq!(t, vec![vec![1, 0], vec![1, 0]]);
    }

    #[test]
    fn pad_examples() {
        let p = pad_series(&record(vec![1.0; 10]), 8);
        assert_eq!(p.len(), 16);
        assert_eq!(p.padding_mask, [vec![1u8; 10], vec![0u8; 6]].concat());
        assert_eq!(p.record.time, (0..16).collect::<Vec<i64>>());
        assert_eq!(p.record.validity[0][12], 0);
        assert_eq!(pad_series(&record(vec![1.0; 16]), 8).padding_mask, vec![1u8; 16]);
        assert_eq!(pad_series(&record(vec![1.0]), 4).len(), 4);
    }

    #[test]
    fn block_examples() {
        let p = pad_series(&record(vec![1.0; 16]), 8);
        let b = extract_blocks(&p, 8, 4, 4).unwrap();
        let spans: Vec<_> = b.iter().map(|b| (b.start, b.end)).collect();
        assert_eq!(spans, vec![(0, 8), (4, 12), (8, 16)]);
        assert_eq!(extract_blocks(&p, 8, 8, 4).unwrap().len(), 2);
        let one = pad_series(&record(vec![1.0; 8]), 8);
        for stride in 1..=8 {
            let b = extract_blocks(&one, 8, stride, 4).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!((b[0].start, b[0].end), (0, 8));
        }
        assert_eq!(
            extract_blocks(&p, 8, 9, 4),
            Err(PreprocessError::InvalidStride { stride: 9, block_size: 8 })
        );
        assert!(extract_blocks(&p, 8, 0, 4).is_err());
    }

    #[test]
    fn off_stride_tail_block() {
        assert_eq!(block_starts(24, 8, 6).unwrap(), vec![0, 6, 12, 16]);
    }

    #[test]
    fn block_mask_and_targets() {
        let mut r = record((0..10).map(f64::from).collect());
        r.labels[1] = vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0];
        r.validity[1][5] = 0;
        let p = pad_series(&r, 8);
        let b = extract_blocks(&p, 8, 8, 2).unwrap();
        assert_eq!(b[0].targets[1], [0, 1, 0]);
        assert_eq!(b[0].mask, vec![1.0, 1.0, 0.0, 1.0]);
        // Samples 8,9 are real, 10..16 padding.
        assert_eq!(b[1].mask, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b[1].padded, vec![false, true, true, true]);
        assert_eq!(&b[0].features[3..6], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stitch_examples() {
        let p = pad_series(&record(vec![1.0; 8]), 4);
        let blocks = extract_blocks(&p, 4, 2, 2).unwrap();
        assert_eq!(blocks.len(), 3);
        let conf = vec![
            vec![[0.1; 3], [0.2; 3]],
            vec![[0.6; 3], [0.3; 3]],
            vec![[0.5; 3], [0.9; 3]],
        ];
        let pairs: Vec<_> = blocks.into_iter().zip(conf).collect();
        let s = stitch_predictions(&pairs).unwrap();
        assert_eq!(s.confidences.len(), 4);
        assert!((s.confidences[1][0] - 0.4).abs() < 1e-12);
        assert!((s.confidences[2][2] - 0.4).abs() < 1e-12);
        assert_eq!(s.confidences[0][0], 0.1);
        assert_eq!(s.confidences[3][0], 0.9);

        let single = extract_blocks(&p, 8, 8, 2).unwrap();
        let conf = vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6], [0.7, 0.8, 0.9], [0.0, 1.0, 0.5]];
        let s = stitch_predictions(&[(single[0].clone(), conf.clone())]).unwrap();
        assert_eq!(s.confidences, conf);
    }

    #[test]
    fn stitch_errors() {
        let p = pad_series(&record(vec![1.0; 12]), 4);
        let blocks = extract_blocks(&p, 4, 4, 2).unwrap();
        let gap: Vec<_> = [0, 2].iter().map(|&i| (blocks[i].clone(), vec![[0.5; 3]; 2])).collect();
        assert_eq!(stitch_predictions(&gap), Err(PreprocessError::CoverageGap { patch: 2 }));
        let misaligned = extract_blocks(&p, 4, 1, 2).unwrap();
        let pairs: Vec<_> = misaligned.into_iter().map(|b| (b, vec![[0.5; 3]; 2])).collect();
        assert!(matches!(stitch_predictions(&pairs), Err(PreprocessError::MisalignedBlock { start: 1, .. })));
        assert_eq!(stitch_predictions(&[]), Err(PreprocessError::NoBlocks));
    }

    #[test]
    fn blocks_csv_format() {
        let p = pad_series(&record(vec![1.0; 4]), 4);
        let blocks = extract_blocks(&p, 4, 4, 2).unwrap();
        let mut buf = Vec::new();
        write_blocks_csv(&mut buf, &blocks).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "record_id,patch_index,start_hesitation,turn,walking,mask\nr,0,0,0,0,1\nr,1,0,0,0,1\n");
    }
}
