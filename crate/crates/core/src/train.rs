//! Adam, the plateau learning-rate schedule, early stopping, the multi-head
//! trainer and the loss-weight grid search.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_images, hflip_augment, in_split, Sample, Split};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph};
use crate::init::stable_hash;
use crate::kernels::{cross_entropy, one_hot};
use crate::par::{map_indices, Execution};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::zoo::{build_model, BuiltModel, Fusion, ModelSpec};

/// A validation loss must drop by more than this to count as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Per-branch loss weights; empty means the model's own weights.
    pub loss_weights: Vec<f64>,
    /// Double the training split with mirrored copies.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            plateau_factor: 0.1,
            plateau_patience: 2,
            early_stop_patience: 3,
            max_epochs: 50,
            seed: 0,
            loss_weights: Vec::new(),
            hflip: true,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, in field order.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("batch_size must be at least 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("lr {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            p.push(format!("eps {} must be positive", self.eps));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            p.push(format!("plateau_factor {} outside (0, 1)", self.plateau_factor));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            p.push("patience values must be at least 1".to_string());
        }
        if self.max_epochs == 0 {
            p.push("max_epochs must be at least 1".to_string());
        }
        if let Some(w) = self.loss_weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            p.push(format!("loss weight {w} outside [0, 1]"));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            Some(first) => Err(Error::InvalidArgument(first.clone())),
            None => Ok(()),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                state.m.shape()
            ),
        ));
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            states: store.ids().map(|id| AdamState::new(store.value(id).shape())).collect(),
        }
    }

    /// Updates every parameter; parameters absent from `grads` get a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = grads
                .param(id)
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
            adam_step(store.value_mut(id), &grad, &mut self.states[id.index()], &self.config)?;
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after `patience` epochs without
/// an improvement over the best loss.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one epoch's validation loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

/// Replays `history` through a [`PlateauScheduler`] starting at `lr`.
pub fn lr_on_plateau(history: &[f64], lr: f64, factor: f64, patience: usize) -> Result<f64> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("empty loss history".into()));
    }
    let mut s = PlateauScheduler::new(factor, patience);
    Ok(history.iter().fold(lr, |lr, &l| s.observe(l, lr)))
}

#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    /// Epoch (1-based) after which training stops, if it does.
    pub stop_epoch: Option<usize>,
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records the loss for 1-based `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best - IMPROVEMENT_THRESHOLD {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            false
        } else {
            self.wait += 1;
            self.wait >= self.patience
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

pub fn early_stop(history: &[f64], patience: usize) -> Result<StopDecision> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("empty loss history".into()));
    }
    let mut es = EarlyStopping::new(patience);
    for (i, &l) in history.iter().enumerate() {
        if es.observe(i + 1, l) {
            return Ok(StopDecision {
                stop_epoch: Some(i + 1),
                best_epoch: es.best_epoch,
            });
        }
    }
    Ok(StopDecision {
        stop_epoch: None,
        best_epoch: es.best_epoch,
    })
}

/// Predictions for a list of samples, concatenated over batches.
#[derive(Clone, Debug)]
pub struct Predictions {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    /// Per head, (N, classes).
    pub logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
    /// Per branch, (N, h, w, 1); only filled when requested.
    pub masks: Vec<Tensor>,
}

fn concat_rows(parts: &[Tensor]) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&shape, data).expect("row concat")
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

pub fn predict(model: &BuiltModel, samples: &[&Sample], batch_size: usize, keep_masks: bool) -> Result<Predictions> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to predict".into()));
    }
    let heads = model.head_names().len();
    let mut logits: Vec<Vec<Tensor>> = vec![Vec::new(); heads];
    let mut probs: Vec<Vec<Tensor>> = vec![Vec::new(); heads];
    let mut masks: Vec<Vec<Tensor>> = vec![Vec::new(); model.branches().len()];
    for chunk in samples.chunks(batch_size.max(1)) {
        let out = model.predict_batch(batch_images(chunk)?)?;
        for (h, (l, p)) in out.logits.into_iter().zip(out.probs).enumerate() {
            logits[h].push(l);
            probs[h].push(p);
        }
        if keep_masks {
            for (b, m) in out.masks.into_iter().enumerate() {
                masks[b].push(m);
            }
        }
    }
    Ok(Predictions {
        ids: samples.iter().map(|s| s.id).collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        logits: logits.iter().map(|p| concat_rows(p)).collect(),
        probs: probs.iter().map(|p| concat_rows(p)).collect(),
        masks: if keep_masks { masks.iter().map(|p| concat_rows(p)).collect() } else { Vec::new() },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Weighted sum of head losses (the training objective).
    pub total_loss: f64,
    pub heads: Vec<HeadScore>,
    pub predictions: Predictions,
}

/// Head-wise loss and accuracy plus the weighted objective on `samples`.
pub fn evaluate(model: &BuiltModel, samples: &[&Sample], batch_size: usize, weights: &[f64], keep_masks: bool) -> Result<Evaluation> {
    let predictions = predict(model, samples, batch_size, keep_masks)?;
    let targets = one_hot(&predictions.labels, model.spec().classes)?;
    let heads: Vec<HeadScore> = predictions
        .probs
        .iter()
        .map(|p| {
            let correct = p
                .data()
                .chunks(model.spec().classes)
                .zip(&predictions.labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            Ok(HeadScore {
                loss: cross_entropy(p, &targets)?,
                accuracy: correct as f64 / predictions.labels.len() as f64,
            })
        })
        .collect::<Result<_>>()?;
    let total_loss = if model.fused_head().is_some() {
        heads[0].loss
    } else {
        heads.iter().zip(weights).map(|(h, w)| h.loss * w).sum()
    };
    Ok(Evaluation {
        total_loss,
        heads,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Per head, in [`RunMetrics::heads`] order.
    pub train_head_loss: Vec<f64>,
    pub val_head_loss: Vec<f64>,
    pub train_head_acc: Vec<f64>,
    pub val_head_acc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub heads: Vec<String>,
    pub weights: Vec<f64>,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub early_stopped: bool,
    pub best_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// Per-epoch CSV: epoch, lr, losses, then loss/accuracy columns per head.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "val_loss".into()];
        for h in &self.heads {
            for col in ["train_loss", "val_loss", "train_acc", "val_acc"] {
                header.push(format!("{h}_{col}"));
            }
        }
        w.write_record(&header).map_err(|e| Error::format(path, e.to_string()))?;
        for e in &self.epochs {
            let mut row = vec![e.epoch.to_string(), e.lr.to_string(), e.train_loss.to_string(), e.val_loss.to_string()];
            for h in 0..self.heads.len() {
                for v in [e.train_head_loss[h], e.val_head_loss[h], e.train_head_acc[h], e.val_head_acc[h]] {
                    row.push(v.to_string());
                }
            }
            w.write_record(&row).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Returned by the per-epoch callback of [`fit_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Loss weights `fit` will use for `model` under `cfg`.
pub fn effective_weights(model: &BuiltModel, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let weights = if cfg.loss_weights.is_empty() {
        model.spec().branch_weights()
    } else {
        cfg.loss_weights.clone()
    };
    if model.fused_head().is_none() && weights.len() != model.branches().len() {
        return Err(Error::InvalidArgument(format!(
            "{} loss weights for {} branches",
            weights.len(),
            model.branches().len()
        )));
    }
    Ok(weights)
}

pub fn fit(model: &mut BuiltModel, samples: &[Sample], cfg: &TrainConfig) -> Result<RunMetrics> {
    fit_with(model, samples, cfg, |_, _| Ok(Flow::Continue))
}

/// Trains on the train split, validates on the val split after every
/// epoch and restores the parameters of the best validation epoch.
/// `on_epoch` sees each epoch's record and the current model.
pub fn fit_with<F>(model: &mut BuiltModel, samples: &[Sample], cfg: &TrainConfig, mut on_epoch: F) -> Result<RunMetrics>
where
    F: FnMut(&EpochRecord, &BuiltModel) -> Result<Flow>,
{
    cfg.validate()?;
    let weights = effective_weights(model, cfg)?;
    let pool = if cfg.hflip { hflip_augment(samples.to_vec()) } else { samples.to_vec() };
    let train = in_split(&pool, Split::Train);
    let val = in_split(&pool, Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty train and val splits, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let heads = model.head_names();
    let classes = model.spec().classes;
    let mut adam = Adam::new(&model.params, cfg.adam());
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best_params = model.params.clone();
    let mut best_val = f64::INFINITY;
    let mut epochs = Vec::new();
    let mut early_stopped = false;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = adam.config.lr;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut total = 0.0;
        let mut head_loss = vec![0.0; heads.len()];
        let mut head_correct = vec![0usize; heads.len()];
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let targets = one_hot(&labels, classes)?;
            let mut graph = Graph::new();
            let out = model.forward(&mut graph, batch_images(&batch)?)?;
            let loss = model.loss(&mut graph, &out, &targets, Some(&weights))?;
            let grads = graph.backward(loss.total)?;
            adam.step(&mut model.params, &grads)?;

            let b = batch.len() as f64;
            total += graph.scalar(loss.total) * b;
            let per_head = if loss.per_branch.is_empty() { vec![loss.total] } else { loss.per_branch.clone() };
            for (h, node) in per_head.iter().enumerate() {
                head_loss[h] += graph.scalar(*node) * b;
            }
            for (h, nodes) in model.head_nodes(&out).iter().enumerate() {
                let p = graph.value(nodes.probs);
                head_correct[h] += p.data().chunks(classes).zip(&labels).filter(|(r, &l)| argmax(r) == l).count();
            }
        }
        let n = train.len() as f64;
        let val_eval = evaluate(model, &val, cfg.batch_size, &weights, false)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: total / n,
            val_loss: val_eval.total_loss,
            train_head_loss: head_loss.iter().map(|l| l / n).collect(),
            val_head_loss: val_eval.heads.iter().map(|h| h.loss).collect(),
            train_head_acc: head_correct.iter().map(|&c| c as f64 / n).collect(),
            val_head_acc: val_eval.heads.iter().map(|h| h.accuracy).collect(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train {:.4} val {:.4} val acc {:?}",
            record.train_loss,
            record.val_loss,
            record.val_head_acc
        );
        adam.config.lr = plateau.observe(record.val_loss, lr);
        if record.val_loss < best_val - IMPROVEMENT_THRESHOLD {
            best_val = record.val_loss;
            best_params = model.params.clone();
        }
        let stop = stopper.observe(epoch, record.val_loss);
        let flow = on_epoch(&record, model)?;
        epochs.push(record);
        if stop {
            early_stopped = true;
            break;
        }
        if flow == Flow::Stop {
            break;
        }
    }
    model.params = best_params;
    Ok(RunMetrics {
        heads,
        weights,
        best_epoch: stopper.best_epoch(),
        stop_epoch: epochs.len(),
        early_stopped,
        best_val_loss: best_val,
        epochs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Candidate weights for the first searched branch.
    pub w0: Vec<f64>,
    /// Candidate weights for the second searched branch.
    pub w1: Vec<f64>,
    /// Epoch budget per cell; early stopping still applies.
    pub max_epochs: usize,
}

/// 0.5, 0.6, ..., 1.0.
pub fn default_weight_axis() -> Vec<f64> {
    (5..=10).map(|k| k as f64 / 10.0).collect()
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            w0: default_weight_axis(),
            w1: default_weight_axis(),
            max_epochs: 15,
        }
    }
}

impl GridConfig {
    /// Cells in row-major (w0, w1) order.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.w0.iter().flat_map(|&a| self.w1.iter().map(move |&b| (a, b))).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub w0: f64,
    pub w1: f64,
    /// Unweighted mean of the branch validation losses at the best epoch.
    pub val_loss: f64,
    /// Best branch validation accuracy at the best epoch.
    pub val_acc: f64,
    pub best_epoch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: usize,
}

impl GridResult {
    pub fn best_cell(&self) -> &GridCell {
        &self.cells[self.best]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(out, "w0,w1,val_loss,val_acc,best_epoch,seed").map_err(io)?;
        for c in &self.cells {
            writeln!(out, "{},{},{},{},{},{}", c.w0, c.w1, c.val_loss, c.val_acc, c.best_epoch, c.seed).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Seed for grid cell `index` derived from a base seed.
pub fn derive_seed(base: u64, index: usize) -> u64 {
    let mut bytes = base.to_le_bytes().to_vec();
    bytes.extend_from_slice(&(index as u64).to_le_bytes());
    stable_hash(&bytes)
}

/// Picks the lowest validation loss; exact ties go to the larger weights.
pub fn select_grid_cell(cells: &[GridCell]) -> Option<usize> {
    (0..cells.len()).min_by(|&a, &b| {
        let (x, y) = (&cells[a], &cells[b]);
        x.val_loss
            .total_cmp(&y.val_loss)
            .then(y.w0.total_cmp(&x.w0))
            .then(y.w1.total_cmp(&x.w1))
    })
}

/// Trains one short run per (w0, w1) cell on the first two branches of a
/// multi-loss model; remaining branches keep their configured weights.
pub fn grid_search_weights(
    spec: &ModelSpec,
    samples: &[Sample],
    train: &TrainConfig,
    grid: &GridConfig,
    exec: Execution,
) -> Result<GridResult> {
    if spec.fusion != Fusion::MultiLoss || spec.branches.len() < 2 {
        return Err(Error::InvalidArgument(
            "grid search needs a multi-loss model with at least two branches".into(),
        ));
    }
    let cells = grid.cells();
    if cells.is_empty() || grid.max_epochs == 0 {
        return Err(Error::InvalidArgument("empty weight grid".into()));
    }
    if let Some(w) = cells.iter().flat_map(|&(a, b)| [a, b]).find(|w| !(*w > 0.0 && *w <= 1.0)) {
        return Err(Error::InvalidArgument(format!("grid weight {w} outside (0, 1]")));
    }
    spec.validate()?;
    train.validate()?;
    let run = |i: usize| -> Result<GridCell> {
        let (w0, w1) = cells[i];
        let mut weights = spec.loss_weights.clone();
        weights[0] = w0;
        weights[1] = w1;
        let seed = derive_seed(spec.seed, i);
        let cell_spec = ModelSpec {
            loss_weights: weights.clone(),
            seed,
            ..spec.clone()
        };
        let cfg = TrainConfig {
            max_epochs: grid.max_epochs,
            loss_weights: weights,
            seed: derive_seed(train.seed, i),
            ..train.clone()
        };
        let mut model = build_model(&cell_spec)?;
        let metrics = fit(&mut model, samples, &cfg)?;
        let best = metrics.best();
        Ok(GridCell {
            w0,
            w1,
            val_loss: best.val_head_loss.iter().sum::<f64>() / best.val_head_loss.len() as f64,
            val_acc: best.val_head_acc.iter().copied().fold(0.0, f64::max),
            best_epoch: metrics.best_epoch,
            seed,
        })
    };
    let cells: Vec<GridCell> = map_indices(exec, cells.len(), run).into_iter().collect::<Result<_>>()?;
    let best = select_grid_cell(&cells).expect("non-empty grid");
    Ok(GridResult { cells, best })
}
