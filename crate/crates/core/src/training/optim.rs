//! Adam training loop with best-validation checkpointing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::dataset::{Dataset, Item, Split};
use super::TrainingError;
use crate::autodiff::{with_denormals_flushed, Tensor, BCE_CLAMP};
use crate::model::{predict_tags, ForwardGraph, Model, TagPrediction};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is allowed: it leaves the model untouched.
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |what: &str| Err(TrainingError::Config(what.to_owned()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive");
        }
        Ok(())
    }
}

/// Mean binary cross-entropy with predictions clamped away from 0 and 1.
pub fn bce_loss(pred: &TagPrediction, label: &[f32]) -> Result<f32, TrainingError> {
    if pred.probabilities.len() != label.len() {
        return Err(TrainingError::Contract(format!(
            "prediction has {} tags, label has {}",
            pred.probabilities.len(),
            label.len()
        )));
    }
    let lo = BCE_CLAMP as f64;
    let sum: f64 = pred
        .probabilities
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let p = (p as f64).clamp(lo, 1.0 - lo);
            let y = y as f64;
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok((sum / label.len() as f64) as f32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub valid_loss: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Mean loss of every optimisation step, in order.
    pub step_losses: Vec<f32>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainOutcome {
    /// History CSV: `epoch,train_loss,valid_loss`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,valid_loss\n");
        for r in &self.history {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.epoch, r.train_loss, r.valid_loss));
        }
        out
    }
}

struct Adam {
    cfg: TrainConfig,
    step: i32,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn update(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>) -> Result<(), TrainingError> {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, g) in grads {
            let n = g.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut p = model.param(name).expect("gradient names come from the model").clone();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
            model.set_param(name, p)?;
        }
        Ok(())
    }
}

/// Loss and parameter gradients for one example.
fn item_gradients(model: &Model, item: &Item) -> Result<(f32, BTreeMap<String, Tensor>), TrainingError> {
    let mut fg = ForwardGraph::build(model, &item.input, None, true)?;
    let loss = fg.bce_loss(&item.target())?;
    let value = fg.graph.value(loss).data()[0];
    let grads = fg.graph.backward(loss).map_err(crate::model::ModelError::from)?;
    Ok((value, grads))
}

/// Mean loss over a split, `None` when the split is empty.
pub(crate) fn split_loss(model: &Model, data: &Dataset, split: Split) -> Result<Option<f32>, TrainingError> {
    let items: Vec<&Item> = data.split(split).collect();
    if items.is_empty() {
        return Ok(None);
    }
    let losses = items
        .par_iter()
        .map(|it| {
            let (pred, _) = predict_tags(model, &it.input, None)?;
            bce_loss(&pred, &it.target())
        })
        .collect::<Result<Vec<f32>, TrainingError>>()?;
    Ok(Some((losses.iter().map(|&l| l as f64).sum::<f64>() / losses.len() as f64) as f32))
}

/// Trains with Adam on the train split and returns the parameters with the
/// lowest validation loss (train loss when there is no validation split).
///
/// Per-example gradients of a batch may be computed in parallel; they are
/// always summed in batch order, so results do not depend on scheduling.
pub fn train(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainingError> {
    train_with_progress(model, data, cfg, |_| {})
}

pub fn train_with_progress(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainingError> {
    with_denormals_flushed(|| train_inner(model, data, cfg, on_epoch))
}

fn train_inner(
    model: &Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainingError> {
    cfg.validate()?;
    let n_tags = model.config().n_tags;
    if let Some(it) = data.items.iter().find(|it| it.target().len() != n_tags) {
        return Err(TrainingError::Contract(format!(
            "item {} has {} labels but the model predicts {n_tags} tags",
            it.id,
            it.target().len()
        )));
    }
    let mut order: Vec<usize> = data
        .items
        .iter()
        .enumerate()
        .filter(|(_, it)| it.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if order.is_empty() {
        return Err(TrainingError::Contract("the train split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg);
    let mut current = model.clone();
    let mut best: Option<(f32, usize, Model)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0f64;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let results = idx
                .par_iter()
                .map(|&i| item_gradients(&current, &data.items[i]))
                .collect::<Result<Vec<_>, TrainingError>>()?;
            let mut loss_sum = 0.0f32;
            let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
            for (loss, grads) in results {
                loss_sum += loss;
                for (name, g) in grads {
                    match total.get_mut(&name) {
                        Some(t) => t.add_assign(&g),
                        None => {
                            total.insert(name, g);
                        }
                    }
                }
            }
            let mean = loss_sum / idx.len() as f32;
            if !mean.is_finite() {
                return Err(TrainingError::NonFinite {
                    epoch,
                    batch,
                    items: idx.iter().map(|&i| data.items[i].id).collect(),
                    loss: mean,
                });
            }
            let scale = 1.0 / idx.len() as f32;
            for g in total.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut current, &total)?;
            step_losses.push(mean);
            epoch_sum += loss_sum as f64;
        }
        let train_loss = (epoch_sum / order.len() as f64) as f32;
        let valid_loss = split_loss(&current, data, Split::Valid)?.unwrap_or(train_loss);
        let rec = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().map_or(true, |(l, _, _)| valid_loss < *l) {
            best = Some((valid_loss, epoch, current.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        history,
        step_losses,
        best_epoch,
    })
}
