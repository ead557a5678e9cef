//! Multi-stage loss, AdamW, warmup+cosine schedule, and the training loop.
//!
//! Each optimization step consumes one full video sequence. The loss per
//! stage is frame-wise cross-entropy plus a truncated mean-squared smoothing
//! term on adjacent-frame log-probabilities (the previous frame treated as
//! constant), summed over stages.

use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, ParamStore};
use crate::layers::Mode;
use crate::model::{argmax_rows, Model, ModelConfig, StageNodes};
use crate::tensor::NdArray;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub smoothing_weight: f64,
    pub smoothing_clip: f64,
    /// Final learning rate as a fraction of `base_lr`.
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Stop once train accuracy (percent) reaches this; 0 disables.
    pub target_train_acc: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            weight_decay: 1e-5,
            warmup_epochs: 40,
            total_epochs: 200,
            smoothing_weight: 0.15,
            smoothing_clip: 4.0,
            min_lr_ratio: 1e-2,
            grad_clip: 1.0,
            target_train_acc: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.smoothing_weight < 0.0 {
            return Err(Error::Config("rates must be non-negative".into()));
        }
        if !(self.smoothing_clip > 0.0) {
            return Err(Error::Config("smoothing_clip must be positive".into()));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            return Err(Error::Config("min_lr_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub stage_losses: Vec<f64>,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let stages = self.records.first().map_or(0, |r| r.stage_losses.len());
        let mut out = String::from("epoch,lr,total_loss");
        for s in 0..stages {
            out.push_str(&format!(",stage{}_loss", s + 1));
        }
        out.push_str(",train_acc\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.8},{:.6}", r.epoch, r.lr, r.total_loss));
            for v in &r.stage_losses {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.4}\n", r.train_acc));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

// ── losses ──────────────────────────────────────────────────────────────

/// Mean over valid frames of -log p(label), with the log argument clamped
/// at 1e-12. A fully masked sequence contributes zero (with a warning).
pub fn ce_loss(g: &mut Graph, probs: NodeId, labels: &[usize], mask: &[bool]) -> Result<NodeId> {
    let (l, c) = g.value(probs).dims2()?;
    if labels.len() != l || mask.len() != l {
        return Err(Error::Data(format!(
            "cross-entropy lengths: {l} prob rows, {} labels, {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&p| p >= c) {
        return Err(Error::Data(format!("label {bad} out of range [0, {c})")));
    }
    let count = mask.iter().filter(|&&v| v).count();
    if count == 0 {
        eprintln!("warning: cross-entropy over a fully masked sequence");
        return Ok(g.constant(NdArray::scalar(0.0)));
    }
    let mut weights = vec![0.0; l * c];
    for t in 0..l {
        if mask[t] {
            weights[t * c + labels[t]] = 1.0 / count as f64;
        }
    }
    let weights = NdArray::new(vec![l, c], weights)?;
    let logp = g.log_clamped(probs, 1e-12)?;
    let picked = g.mul_const(logp, &weights)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0)
}

/// Truncated MSE over adjacent-frame log-probability differences. The
/// previous frame is detached (no gradient through it); per-element
/// magnitudes are clipped at `clip` before squaring.
pub fn smoothing_loss(g: &mut Graph, log_probs: NodeId, clip: f64, mask: &[bool]) -> Result<NodeId> {
    let (l, c) = g.value(log_probs).dims2()?;
    if mask.len() != l {
        return Err(Error::Data(format!(
            "smoothing mask length {} != {l}",
            mask.len()
        )));
    }
    if l < 2 {
        return Ok(g.constant(NdArray::scalar(0.0)));
    }
    let pairs: Vec<bool> = (1..l).map(|t| mask[t] && mask[t - 1]).collect();
    let count = pairs.iter().filter(|&&v| v).count() * c;
    if count == 0 {
        return Ok(g.constant(NdArray::scalar(0.0)));
    }
    let current = g.slice_rows(log_probs, 1, l)?;
    let previous = g.slice_rows(log_probs, 0, l - 1)?;
    let previous = g.detach(previous);
    let diff = g.sub(current, previous)?;
    let clipped = g.clamp(diff, -clip, clip)?;
    let squared = g.mul(clipped, clipped)?;
    let mut weights = vec![0.0; (l - 1) * c];
    for (t, &valid) in pairs.iter().enumerate() {
        if valid {
            weights[t * c..(t + 1) * c]
                .iter_mut()
                .for_each(|w| *w = 1.0 / count as f64);
        }
    }
    let weights = NdArray::new(vec![l - 1, c], weights)?;
    let weighted = g.mul_const(squared, &weights)?;
    g.sum_all(weighted)
}

/// Per-stage composite losses: cross-entropy + smoothing_weight * smoothing.
pub fn stage_losses(
    g: &mut Graph,
    stages: &[StageNodes],
    labels: &[usize],
    mask: &[bool],
    smoothing_weight: f64,
    smoothing_clip: f64,
) -> Result<Vec<NodeId>> {
    if stages.is_empty() {
        return Err(Error::Usage("loss over zero stages".into()));
    }
    let mut out = Vec::with_capacity(stages.len());
    for stage in stages {
        let ce = ce_loss(g, stage.probs, labels, mask)?;
        let logp = g.log_clamped(stage.probs, 1e-12)?;
        let sm = smoothing_loss(g, logp, smoothing_clip, mask)?;
        let sm = g.scale(sm, smoothing_weight)?;
        out.push(g.add(ce, sm)?);
    }
    Ok(out)
}

/// Sum of the per-stage composite losses.
pub fn multi_stage_loss(
    g: &mut Graph,
    stages: &[StageNodes],
    labels: &[usize],
    mask: &[bool],
    smoothing_weight: f64,
    smoothing_clip: f64,
) -> Result<NodeId> {
    let parts = stage_losses(g, stages, labels, mask, smoothing_weight, smoothing_clip)?;
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    Ok(total)
}

// ── optimizer ───────────────────────────────────────────────────────────

/// AdamW moment accumulators.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        AdamState {
            m: store.iter().map(|e| vec![0.0; e.value.numel()]).collect(),
            v: store.iter().map(|e| vec![0.0; e.value.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One AdamW update from the gradients accumulated in the store. Weight
/// decay is decoupled: applied directly to the parameters, not the moments.
pub fn optimizer_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Internal(format!(
            "optimizer state holds {} entries, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (idx, entry) in store.iter_mut().enumerate() {
        if entry.grad.len() != entry.value.numel() {
            return Err(Error::Internal(format!(
                "parameter {}: grad length {} != value length {}",
                entry.name,
                entry.grad.len(),
                entry.value.numel()
            )));
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let values = entry.value.data_mut();
        for k in 0..values.len() {
            let gk = entry.grad[k];
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * gk;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            values[k] -= lr * m_hat / (v_hat.sqrt() + state.eps);
            values[k] -= lr * weight_decay * values[k];
        }
    }
    Ok(())
}

/// Scales all gradients so their global norm is at most `clip`. Returns the
/// pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, clip: f64) -> f64 {
    let norm_sq: f64 = store.iter().map(|e| e.grad.iter().map(|g| g * g).sum::<f64>()).sum();
    let norm = norm_sq.sqrt();
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for e in store.iter_mut() {
            e.grad.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

// ── schedule ────────────────────────────────────────────────────────────

/// Linear warmup from 0 to `base_lr`, then a half-cosine down to
/// `base_lr * min_lr_ratio`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Usage(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * epoch as f64 / cfg.warmup_epochs as f64);
    }
    let min_lr = cfg.base_lr * cfg.min_lr_ratio;
    let span = cfg.total_epochs - cfg.warmup_epochs;
    if span == 0 {
        return Ok(cfg.base_lr);
    }
    let progress = (epoch - cfg.warmup_epochs) as f64 / span as f64;
    Ok(min_lr + (cfg.base_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ── training loop ───────────────────────────────────────────────────────

/// Trains a freshly built model. One optimization step per sequence; when a
/// validation split is supplied the returned model is the best-validation
/// snapshot, otherwise the final state. Deterministic for a given seed.
pub fn train(
    dataset: &[FeatureSequence],
    validation: Option<&[FeatureSequence]>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if dataset.is_empty() {
        return Err(Error::Usage("training dataset is empty".into()));
    }
    train_config.validate()?;
    for seq in dataset {
        seq.validate(model_config.num_classes)?;
    }
    let mut model = Model::new(model_config.clone())?;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..train_config.total_epochs {
        let lr = cosine_lr(epoch, train_config)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_stage_losses = vec![0.0; model_config.stages];
        let mut correct = 0usize;
        let mut total = 0usize;
        for &idx in &order {
            let seq = &dataset[idx];
            let mask = vec![true; seq.len()];
            let mut g = Graph::new();
            let features = g.constant(seq.features.clone());
            let stages = model.forward_graph(&mut g, features, None, Mode::Train, &mut rng)?;
            let parts = stage_losses(
                &mut g,
                &stages,
                &seq.labels,
                &mask,
                train_config.smoothing_weight,
                train_config.smoothing_clip,
            )?;
            let mut loss = parts[0];
            for &p in &parts[1..] {
                loss = g.add(loss, p)?;
            }
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Internal(format!(
                    "non-finite loss at epoch {epoch} on {}",
                    seq.video_id
                )));
            }
            epoch_loss += loss_value;
            for (acc, &p) in epoch_stage_losses.iter_mut().zip(&parts) {
                *acc += g.value(p).data()[0];
            }
            let final_probs = g.value(stages.last().unwrap().probs);
            let pred = argmax_rows(final_probs);
            correct += pred.iter().zip(&seq.labels).filter(|(a, b)| a == b).count();
            total += seq.len();

            model.params_mut().zero_grads();
            g.backward(loss)?;
            g.write_grads(model.params_mut());
            clip_grad_norm(model.params_mut(), train_config.grad_clip);
            optimizer_step(model.params_mut(), &mut adam, lr, train_config.weight_decay)?;
        }
        let n = dataset.len() as f64;
        let train_acc = 100.0 * correct as f64 / total.max(1) as f64;
        history.records.push(EpochRecord {
            epoch,
            lr,
            total_loss: epoch_loss / n,
            stage_losses: epoch_stage_losses.iter().map(|v| v / n).collect(),
            train_acc,
        });

        if let Some(val) = validation {
            let acc = eval_accuracy(&model, val)?;
            let better = best.as_ref().map_or(true, |(b, _)| acc > *b);
            if better {
                best = Some((acc, model.params().clone()));
            }
        }
        if train_config.target_train_acc > 0.0 && train_acc >= train_config.target_train_acc {
            break;
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok((model, history))
}

/// Eval-mode frame accuracy (percent) of the final stage over sequences.
pub fn eval_accuracy(model: &Model, dataset: &[FeatureSequence]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for seq in dataset {
        let outputs = model.forward_eval(&seq.features, None)?;
        let pred = argmax_rows(&outputs.last().unwrap().probs);
        correct += pred.iter().zip(&seq.labels).filter(|(a, b)| a == b).count();
        total += seq.len();
    }
    Ok(100.0 * correct as f64 / total.max(1) as f64)
}
