use std::io::Write;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, EvalError, MetricsReport};
use crate::ingest::{DatasetKind, TimeSeriesRecord};
use crate::model::{forward_on_tape, init_params, params_on_tape, ModelConfig, ModelError, ModelParams};
use crate::nncore::{SeededRng, Tape, Tensor, TensorError, Var};
use crate::preprocess::{extract_blocks, normalize, pad_series, Block, PreprocessError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("total mask {total} is below the floor {floor}")]
    ZeroMask { total: f64, floor: f64 },
    #[error("non-finite gradient for `{name}`")]
    NonFiniteGradient { name: String },
    #[error("record `{id}` is {found}, expected {expected}")]
    MixedDatasetKind { id: String, expected: DatasetKind, found: DatasetKind },
    #[error("dataset has no usable training blocks")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    ConfigInvalid(String),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl TrainError {
    /// The error beneath any step annotation.
    pub fn root(&self) -> &TrainError {
        match self {
            TrainError::AtStep { source, .. } => source.root(),
            other => other,
        }
    }
}

fn bce_parts(p: f64, t: f64, eps: f64) -> (f64, f64) {
    let clipped = p.clamp(eps, 1.0 - eps);
    let value = -(t * clipped.ln() + (1.0 - t) * (1.0 - clipped).ln());
    let slope = if p < eps || p > 1.0 - eps { 0.0 } else { (clipped - t) / (clipped * (1.0 - clipped)) };
    (value, slope)
}

/// `Σ BCE(pred, target) · mask / normalizer` as a tape node. `pred` and
/// `target` are `[N × 3]`; `mask` holds one weight per row and is shared by
/// the three classes. Rows with zero mask are skipped outright, so their
/// predictions can take any value and receive an exact zero gradient.
pub fn masked_bce_sum(
    tape: &mut Tape,
    pred: Var,
    target: &[[u8; 3]],
    mask: &[f64],
    normalizer: f64,
    loss_eps: f64,
) -> Result<Var, TrainError> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != [target.len(), 3] {
        return Err(TensorError::ShapeMismatch { op: "masked_bce", left: shape, right: vec![target.len(), 3] }.into());
    }
    if mask.len() != target.len() {
        return Err(TensorError::ShapeMismatch { op: "masked_bce", left: vec![mask.len()], right: vec![target.len()] }.into());
    }
    let p = tape.value(pred).data();
    let mut total = 0.0;
    for (row, (t, &m)) in target.iter().zip(mask).enumerate() {
        if m == 0.0 {
            continue;
        }
        for k in 0..3 {
            total += m * bce_parts(p[row * 3 + k], f64::from(t[k]), loss_eps).0;
        }
    }
    let value = Tensor::scalar(total / normalizer);
    let target = target.to_vec();
    let mask = mask.to_vec();
    Ok(tape.custom(
        &[pred],
        value,
        Box::new(move |g, parents, _| {
            let scale = g.item() / normalizer;
            let p = parents[0].data();
            let mut grad = vec![0.0; p.len()];
            for (row, (t, &m)) in target.iter().zip(&mask).enumerate() {
                if m == 0.0 {
                    continue;
                }
                for k in 0..3 {
                    grad[row * 3 + k] = scale * m * bce_parts(p[row * 3 + k], f64::from(t[k]), loss_eps).1;
                }
            }
            vec![Tensor::new(parents[0].shape().to_vec(), grad).expect("same shape")]
        }),
    ))
}

/// Mask-normalized BCE: `Σ(BCE ⊙ mask_tiled) / Σ mask_tiled`, with the row
/// mask tiled across the three classes.
pub fn masked_bce_loss(
    tape: &mut Tape,
    pred: Var,
    target: &[[u8; 3]],
    mask: &[f64],
    loss_eps: f64,
    mask_floor: f64,
) -> Result<Var, TrainError> {
    let total = 3.0 * mask.iter().sum::<f64>();
    if total < mask_floor {
        return Err(TrainError::ZeroMask { total, floor: mask_floor });
    }
    masked_bce_sum(tape, pred, target, mask, total, loss_eps)
}

/// Linear warm-up to `peak_lr`, constant afterwards.
pub fn lr_schedule(step: usize, warmup_steps: usize, peak_lr: f64) -> f64 {
    let warmup = warmup_steps.max(1);
    peak_lr * ((step + 1) as f64 / warmup as f64).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine decay from the end of warm-up to zero at `total_steps`.
    pub cosine_decay: bool,
    pub total_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            peak_lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine_decay: false,
            total_steps: 0,
        }
    }
}

impl AdamConfig {
    pub fn lr(&self, step: usize) -> f64 {
        let lr = lr_schedule(step, self.warmup_steps, self.peak_lr);
        if !self.cosine_decay || step < self.warmup_steps || self.total_steps <= self.warmup_steps {
            return lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64).min(1.0);
        lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState { step: 0, m: zeros.clone(), v: zeros, config }
    }
}

/// One Adam update on a list of tensors. Returns the learning rate used.
pub fn adam_update(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<f64, TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ConfigInvalid(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch { op: "adam", left: p.shape().to_vec(), right: g.shape().to_vec() }.into());
        }
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(TrainError::NonFiniteGradient { name });
        }
    }
    let c = &state.config;
    let lr = c.lr(state.step);
    let t = (state.step + 1) as i32;
    let correct1 = 1.0 - c.beta1.powi(t);
    let correct2 = 1.0 - c.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let p = p.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (j, &gj) in g.data().iter().enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    state.step += 1;
    Ok(lr)
}

/// Adam update of a full parameter set with gradients in canonical order.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut OptimizerState) -> Result<f64, TrainError> {
    let names = params.names();
    let mut tensors = params.tensors_mut();
    adam_update(&mut tensors, &names, grads, state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_eps: f64,
    pub mask_floor: f64,
    /// Block stride used to cut training blocks.
    pub stride: usize,
    /// Fraction of records (last by id) held out for per-epoch metrics.
    pub validation_fraction: f64,
    pub threshold: f64,
    pub adam: AdamConfig,
    /// Worker threads for per-block gradients; `None` or 1 runs inline.
    pub threads: Option<usize>,
    /// Print one progress line per epoch to standard error.
    pub progress: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            batch_size: 8,
            steps_per_epoch: 50,
            epochs: 10,
            seed: 0,
            loss_eps: 1e-7,
            mask_floor: 1.0,
            stride: 0,
            validation_fraction: 0.2,
            threshold: 0.5,
            adam: AdamConfig::default(),
            threads: None,
            progress: false,
        }
    }
}

impl TrainRunConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }

    /// Stride in samples; zero means one full block.
    pub fn effective_stride(&self, model: &ModelConfig) -> usize {
        if self.stride == 0 {
            model.block_size
        } else {
            self.stride
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        let bad = |key: &str, why: &str| Err(TrainError::ConfigInvalid(format!("{key}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(self.loss_eps > 0.0 && self.loss_eps < 0.5) {
            return bad("loss_eps", "must lie in (0, 0.5)");
        }
        if !(self.mask_floor > 0.0) {
            return bad("mask_floor", "must be positive");
        }
        if self.effective_stride(model) > model.block_size {
            return bad("stride", "must not exceed block_size");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction", "must lie in [0, 1)");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        let a = &self.adam;
        if !(a.peak_lr > 0.0) || a.warmup_steps == 0 {
            return bad("peak_lr/warmup_steps", "must be positive");
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam", "betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the epoch's step losses.
    pub train_loss: f64,
    /// Eval-mode loss and metrics on the held-out records, if any.
    pub val_loss: Option<f64>,
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_steps_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,epoch,lr,loss")?;
        for s in &self.steps {
            writeln!(out, "{},{},{},{}", s.step, s.epoch, s.lr, s.loss)?;
        }
        Ok(())
    }

    pub fn write_epochs_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "epoch,train_loss,val_loss,ap_start_hesitation,ap_turn,ap_walking,map,accuracy,precision,recall,specificity,f1"
        )?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            write!(out, "{},{},{}", e.epoch, e.train_loss, cell(e.val_loss))?;
            match &e.metrics {
                Some(m) => {
                    let p = &m.pooled;
                    for v in m.ap_per_class.iter().copied().chain([m.map, p.accuracy, p.precision, p.recall, p.specificity, p.f1]) {
                        write!(out, ",{}", cell(v))?;
                    }
                }
                None => write!(out, "{}", ",".repeat(9))?,
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Normalizes, pads and cuts every record into blocks.
pub fn make_blocks(
    records: &[TimeSeriesRecord],
    config: &ModelConfig,
    stride: usize,
) -> Result<Vec<Block>, PreprocessError> {
    let mut blocks = Vec::new();
    for r in records {
        let (normalized, _) = normalize(r);
        let padded = pad_series(&normalized, config.block_size);
        blocks.extend(extract_blocks(&padded, config.block_size, stride, config.patch_size)?);
    }
    Ok(blocks)
}

/// Splits records sorted by id into (train, held-out): the last
/// `floor(n · fraction)` records are held out.
pub fn split_records(records: &[TimeSeriesRecord], fraction: f64) -> (Vec<TimeSeriesRecord>, Vec<TimeSeriesRecord>) {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let held = ((sorted.len() as f64 * fraction).floor() as usize).min(sorted.len().saturating_sub(1));
    let val = sorted.split_off(sorted.len() - held);
    (sorted, val)
}

/// Fold `fold` of `k` contiguous folds over records sorted by id.
pub fn fold_split(
    records: &[TimeSeriesRecord],
    fold: usize,
    k: usize,
) -> (Vec<TimeSeriesRecord>, Vec<TimeSeriesRecord>) {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = sorted.len();
    let (lo, hi) = (fold * n / k, (fold + 1) * n / k);
    let val = sorted[lo..hi].to_vec();
    let train = sorted[..lo].iter().chain(&sorted[hi..]).cloned().collect();
    (train, val)
}

pub fn check_single_kind(records: &[TimeSeriesRecord]) -> Result<DatasetKind, TrainError> {
    let first = records.first().ok_or(TrainError::EmptyDataset)?;
    if let Some(r) = records.iter().find(|r| r.kind != first.kind) {
        return Err(TrainError::MixedDatasetKind { id: r.id.clone(), expected: first.kind, found: r.kind });
    }
    Ok(first.kind)
}

/// Loss contribution and parameter gradients of one block.
fn block_gradients(
    block: &Block,
    params: &ModelParams,
    config: &ModelConfig,
    normalizer: f64,
    loss_eps: f64,
    mut rng: SeededRng,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    let mut tape = Tape::new();
    let vars = params_on_tape(&mut tape, params);
    let pred = forward_on_tape(&mut tape, &block.features, &vars, config, &mut rng, true)?;
    let loss = masked_bce_sum(&mut tape, pred, &block.targets, &block.mask, normalizer, loss_eps)?;
    tape.backward(loss)?;
    let grads = vars.map(|_, &v| tape.grad(v));
    Ok((tape.value(loss).item(), grads.tensors().into_iter().cloned().collect()))
}

/// Mask-normalized eval-mode loss over a set of blocks.
pub fn dataset_loss(blocks: &[Block], params: &ModelParams, config: &ModelConfig, loss_eps: f64) -> Result<f64, TrainError> {
    let total: f64 = 3.0 * blocks.iter().flat_map(|b| &b.mask).sum::<f64>();
    if total <= 0.0 {
        return Err(TrainError::ZeroMask { total, floor: 0.0 });
    }
    let mut sum = 0.0;
    for b in blocks {
        let mut tape = Tape::new();
        let vars = params.map(|_, t| tape.constant(t.clone()));
        let mut rng = SeededRng::new(0);
        let pred = forward_on_tape(&mut tape, &b.features, &vars, config, &mut rng, false)?;
        let loss = masked_bce_sum(&mut tape, pred, &b.targets, &b.mask, total, loss_eps)?;
        sum += tape.value(loss).item();
    }
    Ok(sum)
}

/// Parameters a run with `run.seed` starts from.
pub fn initial_params(model: &ModelConfig, run: &TrainRunConfig) -> Result<ModelParams, ModelError> {
    init_params(model, SeededRng::new(run.seed).next_u64())
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub kind: DatasetKind,
}

/// Splits records by id into training and held-out sets, then trains.
pub fn train(
    records: &[TimeSeriesRecord],
    model: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<TrainOutput, TrainError> {
    check_single_kind(records)?;
    let (train_records, val_records) = split_records(records, run.validation_fraction);
    train_with_split(&train_records, &val_records, model, run)
}

/// Trains on `train_records` and reports per-epoch metrics on
/// `val_records` (skipped when empty). Blocks with no masked-in patch are
/// dropped and batches cycle through a reshuffled block order. Gradients of
/// a batch are summed in block order, so the result is identical for any
/// thread count.
pub fn train_with_split(
    train_records: &[TimeSeriesRecord],
    val_records: &[TimeSeriesRecord],
    model: &ModelConfig,
    run: &TrainRunConfig,
) -> Result<TrainOutput, TrainError> {
    model.validate()?;
    run.validate(model)?;
    let kind = check_single_kind(train_records)?;
    if let Some(r) = val_records.iter().find(|r| r.kind != kind) {
        return Err(TrainError::MixedDatasetKind { id: r.id.clone(), expected: kind, found: r.kind });
    }
    let stride = run.effective_stride(model);
    let blocks: Vec<Block> = make_blocks(train_records, model, stride)?
        .into_iter()
        .filter(|b| b.mask.iter().any(|&m| m > 0.0))
        .collect();
    if blocks.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val_blocks: Vec<Block> = make_blocks(val_records, model, model.block_size)?;

    let mut rng = SeededRng::new(run.seed);
    let mut params = init_params(model, rng.next_u64())?;
    debug_assert_eq!(params, initial_params(model, run)?);
    let mut adam = run.adam.clone();
    if adam.total_steps == 0 {
        adam.total_steps = run.total_steps();
    }
    let mut state = OptimizerState::new(&params, adam);
    let pool = match run.threads {
        Some(n) if n > 1 => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| TrainError::ConfigInvalid(format!("threads: {e}")))?,
        ),
        _ => None,
    };

    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    let mut cursor = order.len();
    for epoch in 0..run.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..run.steps_per_epoch {
            let step = state.step;
            let at = |e: TrainError| TrainError::AtStep { step, source: Box::new(e) };
            let mut batch = Vec::with_capacity(run.batch_size);
            while batch.len() < run.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(&blocks[order[cursor]]);
                cursor += 1;
            }
            let total = 3.0 * batch.iter().flat_map(|b| &b.mask).sum::<f64>();
            if total < run.mask_floor {
                return Err(at(TrainError::ZeroMask { total, floor: run.mask_floor }));
            }
            let jobs: Vec<(&Block, SeededRng)> = batch.iter().map(|&b| (b, rng.split())).collect();
            let run_job = |(b, r): (&Block, SeededRng)| block_gradients(b, &params, model, total, run.loss_eps, r);
            let results: Vec<Result<(f64, Vec<Tensor>), TrainError>> = match &pool {
                Some(pool) => pool.install(|| jobs.into_par_iter().map(run_job).collect()),
                None => jobs.into_iter().map(run_job).collect(),
            };
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for res in results {
                let (l, g) = res.map_err(at)?;
                loss += l;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let lr = adam_step(&mut params, &grads.expect("batch is non-empty"), &mut state).map_err(at)?;
            history.steps.push(StepRecord { step, epoch, lr, loss });
            epoch_loss += loss;
        }

        let (val_loss, metrics) = if val_blocks.is_empty() {
            (None, None)
        } else {
            let loss = dataset_loss(&val_blocks, &params, model, run.loss_eps).ok();
            (loss, Some(evaluate(val_records, &params, model, run.threshold, run.threads)?))
        };
        let record = EpochRecord { epoch, train_loss: epoch_loss / run.steps_per_epoch as f64, val_loss, metrics };
        if run.progress {
            let map = record.metrics.as_ref().and_then(|m| m.map).map_or("-".into(), |v| format!("{v:.4}"));
            eprintln!("epoch {:>3}  train_loss {:.5}  val_map {map}", epoch + 1, record.train_loss);
        }
        history.epochs.push(record);
    }
    Ok(TrainOutput { params, history, kind })
}
