//! Losses, AdamW, the plateau schedule, the training loop, checkpoints and
//! the series-level cross-validation harness.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::graphs::{granger_prior_pooled, GrangerConfig, PriorGraph};
use crate::metrics::{mean_std, MetricReport, WindowMetrics};
use crate::model::{Ablation, LossParts, Model, ModelConfig, ModelParams};

/// Mean squared error over all entries.
pub fn loss_mse(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    crate::metrics::mse(pred, target)
}

/// Sum over edges of the entrywise absolute discrepancy (`E x m` input).
pub fn loss_sparse(deltas: ArrayView2<'_, f64>) -> f64 {
    deltas.iter().map(|v| v.abs()).sum()
}

/// `sum_{E u P} | ||delta_e|| - 1{e in P} |`, with a zero discrepancy for
/// prior edges the sheaf does not carry.
pub fn loss_prior(edges: &[(usize, usize)], deltas: ArrayView2<'_, f64>, prior: &PriorGraph) -> Result<f64> {
    if deltas.nrows() != edges.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} discrepancies for {} edges",
            deltas.nrows(),
            edges.len()
        )));
    }
    let mut total = 0.0;
    for (row, &e) in deltas.rows().into_iter().zip(edges) {
        let norm = row.dot(&row).sqrt();
        let target = if prior.contains(e) { 1.0 } else { 0.0 };
        total += (norm - target).abs();
    }
    let carried: BTreeSet<_> = edges.iter().copied().collect();
    total += prior.edges.iter().filter(|e| !carried.contains(e)).count() as f64;
    Ok(total)
}

/// `mse + lambda1 * sparse + lambda2 * prior`.
pub fn total_loss(
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    edges: &[(usize, usize)],
    deltas: ArrayView2<'_, f64>,
    prior: &PriorGraph,
    lambda1: f64,
    lambda2: f64,
) -> Result<f64> {
    Ok(combine(
        loss_mse(pred, target)?,
        loss_sparse(deltas),
        loss_prior(edges, deltas, prior)?,
        lambda1,
        lambda2,
    ))
}

pub fn combine(mse: f64, sparse: f64, prior: f64, lambda1: f64, lambda2: f64) -> f64 {
    mse + lambda1 * sparse + lambda2 * prior
}

/// Gradient of `lambda1 * sparse + lambda2 * prior` with respect to the
/// discrepancies. Subgradient 0 is used at the kinks.
pub(crate) fn regularizer_grad(
    deltas: ArrayView2<'_, f64>,
    edges: &[(usize, usize)],
    prior: &PriorGraph,
    lambda1: f64,
    lambda2: f64,
) -> Array2<f64> {
    let mut out = deltas.mapv(|v| lambda1 * sign(v));
    for ((row, mut grow), &e) in deltas.rows().into_iter().zip(out.rows_mut()).zip(edges) {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            continue;
        }
        let target = if prior.contains(e) { 1.0 } else { 0.0 };
        let coef = lambda2 * sign(norm - target) / norm;
        grow.zip_mut_with(&row, |g, &v| *g += coef * v);
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *p *= 1.0 - lr * weight_decay;
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience_epochs: usize,
    pub min_lr: f64,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience_epochs: 3,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

/// Multiplies the learning rate by `factor` after `patience_epochs`
/// consecutive epochs without improvement.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    config: SchedulerConfig,
    best: f64,
    bad_epochs: usize,
    lr: f64,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig, lr: f64) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            bad_epochs: 0,
            lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one validation loss; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric < self.best * (1.0 - self.config.threshold) || self.best.is_infinite() {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience_epochs {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub scheduler: SchedulerConfig,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-3,
            lambda2: 1e-2,
            lr: 1e-3,
            weight_decay: 1e-5,
            scheduler: SchedulerConfig::default(),
            max_epochs: 100,
            batch_size: 64,
            folds: 5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scheduler;
        let bad = if !(self.lr > 0.0) {
            Some("lr must be positive")
        } else if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            Some("loss weights must be nonnegative")
        } else if !(self.weight_decay >= 0.0) {
            Some("weight decay must be nonnegative")
        } else if !(s.factor > 0.0 && s.factor < 1.0) {
            Some("scheduler factor must lie in (0, 1)")
        } else if !(s.min_lr >= 0.0 && s.threshold >= 0.0) {
            Some("scheduler bounds must be nonnegative")
        } else if self.batch_size == 0 {
            Some("batch size must be positive")
        } else if self.folds < 2 {
            Some("need at least two folds")
        } else {
            None
        };
        match bad {
            Some(msg) => Err(Error::InvalidParameter(msg.into())),
            None => Ok(()),
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub train_config: TrainingConfig,
    pub validation_loss: f64,
    /// Epochs completed when this snapshot was taken (0 for the initial one).
    pub epoch: usize,
    /// Source series the training windows came from.
    pub training_sources: Vec<String>,
    /// Training sources whose windows straddle a perturbation.
    pub perturbed_sources: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub log: Vec<EpochLog>,
}

/// Rounds every parameter to single precision, the storage precision of
/// checkpoints.
fn round_to_f32(params: &mut ModelParams) {
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Mean loss terms over a window set, evaluated in parallel.
pub fn mean_loss(model: &Model, windows: &[TrajectoryWindow], lambda1: f64, lambda2: f64) -> Result<LossParts> {
    let parts: Vec<LossParts> = windows
        .par_iter()
        .map(|w| model.loss(w.context.view(), w.horizon.view(), lambda1, lambda2))
        .collect::<Result<_>>()?;
    let n = parts.len().max(1) as f64;
    let mut acc = LossParts::default();
    for p in &parts {
        acc.mse += p.mse / n;
        acc.sparse += p.sparse / n;
        acc.prior += p.prior / n;
        acc.total += p.total / n;
    }
    Ok(acc)
}

fn sources(windows: &[TrajectoryWindow], perturbed: bool) -> Vec<String> {
    let set: BTreeSet<_> = windows
        .iter()
        .filter(|w| !perturbed || w.perturbation_onset_index.is_some())
        .map(|w| w.source_id.clone())
        .collect();
    set.into_iter().collect()
}

/// Trains a fresh model on `train` and keeps the snapshot with the lowest
/// validation loss (training loss when `val` is empty).
pub fn train(
    train: &[TrajectoryWindow],
    val: &[TrajectoryWindow],
    prior: &PriorGraph,
    model_config: &ModelConfig,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParameter("no training windows".into()));
    }
    let mut model = Model::init(model_config, prior, config.seed)?;
    let mask = model.trainable_mask();
    let (l1, l2) = (config.lambda1, config.lambda2);
    let monitor = if val.is_empty() { train } else { val };

    let mut best_model = model.clone();
    round_to_f32(&mut best_model.params);
    let mut best = ModelCheckpoint {
        validation_loss: mean_loss(&best_model, monitor, l1, l2)?.total,
        model: best_model,
        train_config: config.clone(),
        epoch: 0,
        training_sources: sources(train, false),
        perturbed_sources: sources(train, true),
    };

    let mut states: Vec<AdamState> = model.params.tensors().iter().map(|t| AdamState::new(t.len())).collect();
    let mut scheduler = PlateauScheduler::new(config.scheduler.clone(), config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.max_epochs);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let lr = scheduler.lr();
        let mut train_total = 0.0;
        for (batch_id, batch) in order.chunks(config.batch_size).enumerate() {
            let results: Vec<(LossParts, ModelParams)> = batch
                .par_iter()
                .map(|&i| model.loss_and_grad(train[i].context.view(), train[i].horizon.view(), l1, l2))
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFiniteState { .. } => Error::Divergence { epoch, batch: batch_id },
                    other => other,
                })?;
            let mut grad = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for (parts, g) in &results {
                batch_loss += parts.total;
                grad.add_assign(g);
            }
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_id });
            }
            train_total += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for (k, (p, g)) in model.params.tensors_mut().into_iter().zip(grad.tensors()).enumerate() {
                if mask[k] {
                    let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    adamw_step(p, &g, &mut states[k], lr, config.weight_decay);
                }
            }
            if !model.params.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_id });
            }
        }
        let val_loss = mean_loss(&model, monitor, l1, l2)
            .map_err(|e| match e {
                Error::NonFiniteState { .. } => Error::Divergence { epoch, batch: 0 },
                other => other,
            })?
            .total;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, batch: 0 });
        }
        log.push(EpochLog {
            epoch,
            train_loss: train_total / train.len() as f64,
            val_loss,
            lr,
        });
        log::debug!("epoch {epoch}: train {:.6} val {val_loss:.6} lr {lr:e}", train_total / train.len() as f64);
        if val_loss < best.validation_loss {
            let mut snapshot = model.clone();
            round_to_f32(&mut snapshot.params);
            best.model = snapshot;
            best.validation_loss = val_loss;
            best.epoch = epoch;
        }
        scheduler.step(val_loss);
    }
    Ok(TrainOutcome { checkpoint: best, log })
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BINARY: &str = "params.bin";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    model_config: ModelConfig,
    train_config: TrainingConfig,
    prior: PriorGraph,
    validation_loss: f64,
    epoch: usize,
    training_sources: Vec<String>,
    perturbed_sources: Vec<String>,
    dtype: String,
    binary: String,
    binary_sha256: String,
    tensors: Vec<TensorEntry>,
}

const CHECKPOINT_FORMAT: &str = "sheaf-ode-checkpoint/1";

impl ModelCheckpoint {
    /// Writes the manifest and the little-endian f32 parameter file into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.model.params;
        let shapes: Vec<Vec<usize>> = vec![
            p.lstm.w_ih.shape().to_vec(),
            p.lstm.w_hh.shape().to_vec(),
            p.lstm.bias.shape().to_vec(),
            p.sheaf.rho_src.shape().to_vec(),
            p.sheaf.rho_dst.shape().to_vec(),
            p.sheaf.attention.shape().to_vec(),
            p.field.w1.shape().to_vec(),
            p.field.b1.shape().to_vec(),
            p.field.w2.shape().to_vec(),
            vec![],
        ];
        let mut bytes = Vec::with_capacity(4 * p.n_scalars());
        let mut tensors = Vec::new();
        let mut offset = 0;
        for ((name, shape), data) in ModelParams::tensor_names().iter().zip(shapes).zip(p.tensors()) {
            for &v in data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            tensors.push(TensorEntry {
                name: (*name).into(),
                shape,
                offset,
                len: data.len(),
            });
            offset += data.len();
        }
        let bin_path = dir.join(CHECKPOINT_BINARY);
        fs::write(&bin_path, &bytes).map_err(|e| Error::io(&bin_path, e))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            prior: self.model.prior.clone(),
            validation_loss: self.validation_loss,
            epoch: self.epoch,
            training_sources: self.training_sources.clone(),
            perturbed_sources: self.perturbed_sources.clone(),
            dtype: "f32le".into(),
            binary: CHECKPOINT_BINARY.into(),
            binary_sha256: crate::io::sha256_hex(&bytes),
            tensors,
        };
        crate::io::write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = crate::io::read_json(&dir.join(CHECKPOINT_MANIFEST))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32le" {
            return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
        }
        let bin_path = dir.join(&manifest.binary);
        let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if crate::io::sha256_hex(&bytes) != manifest.binary_sha256 {
            return Err(Error::Checkpoint("parameter file hash does not match the manifest".into()));
        }
        let mut model = Model::init(&manifest.model_config, &manifest.prior, 0)?;
        let names = ModelParams::tensor_names();
        if manifest.tensors.len() != names.len() || bytes.len() != 4 * model.params.n_scalars() {
            return Err(Error::Checkpoint("parameter file does not match the model configuration".into()));
        }
        for ((entry, name), dst) in manifest.tensors.iter().zip(names).zip(model.params.tensors_mut()) {
            let expected: usize = entry.shape.iter().product();
            if entry.name != name || entry.len != dst.len() || expected != entry.len {
                return Err(Error::Checkpoint(format!("tensor {} has an unexpected shape", entry.name)));
            }
            let raw = &bytes[4 * entry.offset..4 * (entry.offset + entry.len)];
            for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
            }
        }
        Ok(Self {
            model,
            train_config: manifest.train_config,
            validation_loss: manifest.validation_loss,
            epoch: manifest.epoch,
            training_sources: manifest.training_sources,
            perturbed_sources: manifest.perturbed_sources,
        })
    }
}

/// Series ids of one fold's three partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Series-level fold assignment. The sorted ids are shuffled with `seed` and
/// cut into `2 * folds` chunks; fold `k` tests on chunks `2k` and `2k + 1`,
/// validates on chunk `2k + 2` (cyclically) and trains on the rest.
pub fn fold_assignment(series_ids: &[String], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::InvalidParameter("need at least two folds".into()));
    }
    let mut ids: Vec<String> = series_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let chunks = 2 * folds;
    if ids.len() < chunks {
        return Err(Error::InvalidParameter(format!(
            "{} series cannot fill {chunks} chunks for {folds} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let bounds: Vec<usize> = (0..=chunks).map(|c| c * ids.len() / chunks).collect();
    let chunk = |c: usize| ids[bounds[c]..bounds[c + 1]].to_vec();
    Ok((0..folds)
        .map(|k| {
            let test_chunks = [2 * k, 2 * k + 1];
            let val_chunk = (2 * k + 2) % chunks;
            let mut split = FoldSplit {
                train: Vec::new(),
                val: chunk(val_chunk),
                test: test_chunks.iter().flat_map(|&c| chunk(c)).collect(),
            };
            for c in (0..chunks).filter(|c| !test_chunks.contains(c) && *c != val_chunk) {
                split.train.extend(chunk(c));
            }
            split
        })
        .collect())
}

/// Single train/validation/test split in the cross-validation proportions:
/// after a seeded shuffle of the sorted ids, the first `max(1, n/5)` series
/// are held out for testing and the next `max(1, n/10)` for validation.
pub fn holdout_split(series_ids: &[String], seed: u64) -> Result<FoldSplit> {
    let mut ids: Vec<String> = series_ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "need at least 3 series for a train/validation/test split, got {}",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (ids.len() / 5).max(1);
    let n_val = (ids.len() / 10).max(1);
    let mut split = FoldSplit {
        test: ids[..n_test].to_vec(),
        val: ids[n_test..n_test + n_val].to_vec(),
        train: ids[n_test + n_val..].to_vec(),
    };
    split.test.sort();
    split.val.sort();
    split.train.sort();
    Ok(split)
}

/// One source series as seen by the harness.
#[derive(Clone, Debug)]
pub struct CvSeries {
    pub id: String,
    /// Windows used when the series is in a training or validation partition.
    pub train_windows: Vec<TrajectoryWindow>,
    /// Windows scored when the series is in the test partition.
    pub eval_windows: Vec<TrajectoryWindow>,
}

/// A method in the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Model(Ablation),
    /// Repeat the last context value.
    CopyLast,
    /// Predict each node's context mean.
    ContextMean,
}

impl Method {
    pub fn name(self) -> String {
        match self {
            Method::Model(a) => format!("model_{}", a.name()),
            Method::CopyLast => "copy_last".into(),
            Method::ContextMean => "context_mean".into(),
        }
    }
}

pub fn copy_last_forecast(context: ArrayView2<'_, f64>, t_hor: usize) -> Array2<f64> {
    let last = context.column(context.ncols() - 1);
    Array2::from_shape_fn((context.nrows(), t_hor), |(i, _)| last[i])
}

pub fn context_mean_forecast(context: ArrayView2<'_, f64>, t_hor: usize) -> Array2<f64> {
    let mean = context.mean_axis(ndarray::Axis(1)).expect("non-empty context");
    Array2::from_shape_fn((context.nrows(), t_hor), |(i, _)| mean[i])
}

/// Scores a predictor on windows (in each window's normalized units).
pub fn score_windows<F>(windows: &[TrajectoryWindow], predict: F) -> Result<MetricReport>
where
    F: Fn(&TrajectoryWindow) -> Result<Array2<f64>> + Sync,
{
    let per: Vec<WindowMetrics> = windows
        .par_iter()
        .map(|w| WindowMetrics::compute(predict(w)?.view(), w.horizon.view()))
        .collect::<Result<_>>()?;
    MetricReport::from_windows(per)
}

pub fn score_model(model: &Model, windows: &[TrajectoryWindow]) -> Result<MetricReport> {
    score_windows(windows, |w| Ok(model.forecast(w.context.view(), w.horizon_len())?.values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub split: FoldSplit,
    pub prior_edges: usize,
    pub methods: Vec<(String, MetricReport)>,
}

/// Mean and std across folds of the per-fold mean metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    pub dtw_mean: f64,
    pub dtw_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub table: Vec<MethodRow>,
}

impl CvReport {
    pub fn row(&self, method: Method) -> Option<&MethodRow> {
        let name = method.name();
        self.table.iter().find(|r| r.method == name)
    }
}

/// Runs every method on every fold. The prior graph of a fold is pooled
/// from its training windows only.
pub fn cross_validate(
    dataset: &[CvSeries],
    prior_config: &GrangerConfig,
    model_config: &ModelConfig,
    config: &TrainingConfig,
    methods: &[Method],
) -> Result<CvReport> {
    config.validate()?;
    let ids: Vec<String> = dataset.iter().map(|s| s.id.clone()).collect();
    let splits = fold_assignment(&ids, config.folds, config.seed)?;
    let gather = |names: &[String], eval: bool| -> Vec<TrajectoryWindow> {
        dataset
            .iter()
            .filter(|s| names.contains(&s.id))
            .flat_map(|s| if eval { s.eval_windows.clone() } else { s.train_windows.clone() })
            .collect()
    };
    let mut folds = Vec::with_capacity(splits.len());
    for (k, split) in splits.into_iter().enumerate() {
        let train_w = gather(&split.train, false);
        let val_w = gather(&split.val, false);
        let test_w = gather(&split.test, true);
        let prior = granger_prior_pooled(train_w.iter().map(|w| w.context.view()), prior_config)?;
        let mut results = Vec::with_capacity(methods.len());
        for &method in methods {
            let report = match method {
                Method::CopyLast => score_windows(&test_w, |w| Ok(copy_last_forecast(w.context.view(), w.horizon_len())))?,
                Method::ContextMean => {
                    score_windows(&test_w, |w| Ok(context_mean_forecast(w.context.view(), w.horizon_len())))?
                }
                Method::Model(ablation) => {
                    let mc = ModelConfig {
                        ablation,
                        ..model_config.clone()
                    };
                    let outcome = train(&train_w, &val_w, &prior, &mc, config)?;
                    score_model(&outcome.checkpoint.model, &test_w)?
                }
            };
            log::info!("fold {k} {}: mse {:.5}", method.name(), report.mse);
            results.push((method.name(), report));
        }
        folds.push(FoldResult {
            fold: k,
            split,
            prior_edges: prior.edges.len(),
            methods: results,
        });
    }
    let table = methods
        .iter()
        .enumerate()
        .map(|(j, m)| {
            let col = |f: fn(&MetricReport) -> f64| mean_std(folds.iter().map(|fr| f(&fr.methods[j].1)));
            let (mse_mean, mse_std) = col(|r| r.mse);
            let (mae_mean, mae_std) = col(|r| r.mae);
            let (dtw_mean, dtw_std) = col(|r| r.dtw);
            MethodRow {
                method: m.name(),
                mse_mean,
                mse_std,
                mae_mean,
                mae_std,
                dtw_mean,
                dtw_std,
            }
        })
        .collect();
    Ok(CvReport { folds, table })
}
