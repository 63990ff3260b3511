//! Optimizers and the training loop: SGD with momentum and ADAM, per-epoch
//! learning-rate decay, deterministic shuffling, and packed-mode evaluation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{epoch_permutation, Dataset};
use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

use super::{compile, ExecMode, Model};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn from_name(name: &str, momentum: f32) -> Result<Self> {
        match name {
            "sgd" => Ok(OptimizerKind::Sgd { momentum }),
            "adam" => Ok(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }),
            other => Err(invalid_arg!("unknown optimizer '{other}'")),
        }
    }
}

pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f32,
    pub weight_decay: f32,
    // first/second moment (Adam) or velocity (SGD) per parameter
    state_m: BTreeMap<String, Vec<f32>>,
    state_v: BTreeMap<String, Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f32, weight_decay: f32) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            state_m: BTreeMap::new(),
            state_v: BTreeMap::new(),
            steps: 0,
        }
    }

    /// Apply one update. Parameters named `merge.betas` train at a 10x
    /// smaller learning rate.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>) {
        self.steps += 1;
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let lr = if name.starts_with("merge.betas") {
                self.lr * 0.1
            } else {
                self.lr
            };
            let wd = if name.ends_with(".w") { self.weight_decay } else { 0.0 };
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let vel = self
                        .state_m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; p.numel()]);
                    for ((w, &g), v) in p.data.iter_mut().zip(&grad.data).zip(vel.iter_mut()) {
                        let g = g + wd * *w;
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self
                        .state_m
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; p.numel()]);
                    let v = self
                        .state_v
                        .entry(name.clone())
                        .or_insert_with(|| vec![0.0; p.numel()]);
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((w, &g), mi), vi) in
                        p.data.iter_mut().zip(&grad.data).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let g = g + wd * *w;
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One record per epoch in the metrics log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f32,
    pub train_accuracy: f32,
    pub lr: f32,
    pub shuffle_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f32>,
}

/// One full pass over the dataset with mini-batches in a seeded shuffle
/// order. Deterministic given the seed.
pub fn train_epoch(
    model: &mut Model,
    ds: &Dataset,
    opt: &mut Optimizer,
    seed: u64,
    epoch: usize,
) -> Result<EpochMetrics> {
    if ds.is_empty() {
        return Err(invalid_arg!("train_epoch on an empty dataset"));
    }
    let batch_size = model.hyper.batch_size.max(1);
    let perm = epoch_permutation(ds.len(), seed, epoch);
    let mut total_loss = 0.0f64;
    let mut total_correct = 0usize;
    let mut batches = 0usize;
    for chunk in perm.chunks(batch_size) {
        let (batch, labels) = ds.gather(chunk);
        let logits = model.forward(&batch, ExecMode::Train)?;
        total_correct += count_correct(&logits, &labels);
        let (loss, grads) = model.backward(&labels)?;
        total_loss += loss as f64;
        batches += 1;
        opt.step(&mut model.params, &grads);
        if model.trainable_beta {
            if let Some(b) = model.params.get("merge.betas") {
                model.merge_betas = b.data.clone();
            }
        }
    }
    Ok(EpochMetrics {
        epoch,
        loss: (total_loss / batches.max(1) as f64) as f32,
        train_accuracy: total_correct as f32 / ds.len() as f32,
        lr: opt.lr,
        shuffle_seed: seed,
        test_accuracy: None,
    })
}

/// Learning rate after applying the configured decay schedule for `epoch`
/// (0-based; a decay listed at epoch e takes effect from epoch e onward).
pub fn lr_at_epoch(base: f32, decay_epochs: &[usize], decay: f32, epoch: usize) -> f32 {
    let hits = decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base * decay.powi(hits as i32)
}

/// Top-1 accuracy in packed inference mode (compiles once).
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<f32> {
    let compiled = compile::compile(model)?;
    evaluate_compiled(&compiled, ds)
}

pub fn evaluate_compiled(compiled: &compile::CompiledModel, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Err(invalid_arg!("evaluate on an empty dataset"));
    }
    let dims: Vec<usize> = ds.sample_shape().to_vec();
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let (x, y) = ds.sample(i);
        let logits = compiled.forward_sample(x, &dims)?;
        if argmax(&logits) == y as usize {
            correct += 1;
        }
    }
    Ok(correct as f32 / ds.len() as f32)
}

/// Top-1 accuracy through the dense reference path.
pub fn evaluate_reference(model: &mut Model, ds: &Dataset) -> Result<f32> {
    if ds.is_empty() {
        return Err(invalid_arg!("evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    let batch = 256usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, labels) = ds.gather(chunk);
        let logits = model.forward(&x, ExecMode::InferReference)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(correct as f32 / ds.len() as f32)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0usize;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn count_correct(logits: &Tensor, labels: &[u32]) -> usize {
    let classes = logits.shape[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(&logits.data[b * classes..(b + 1) * classes]) == y as usize)
        .count()
}
