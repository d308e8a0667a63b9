//! Training loop, stratified splits, and evaluation metrics.
//!
//! Each iteration is one shuffled pass over the training set in minibatches.
//! Euclidean tensors take plain SGD steps and attention weights take
//! Riemannian steps on the Stiefel manifold, both with the same rate. The
//! parameters with the lowest validation loss seen are returned.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attention::attention_scores;
use crate::autodiff::stiefel_step;
use crate::data::{Dataset, Trial};
use crate::error::{MattError, Result};
use crate::model::{forward, loss_and_grads, mean_loss, Checkpoint, MattConfig, ParamRegistry};
use crate::sampling::seeded_rng;

/// Offset that decorrelates the shuffling stream from the split stream.
const SHUFFLE_STREAM: u64 = 0x5851_F42D_4C95_7F2D;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 350,
            lr: 1e-2,
            batch_size: 32,
            seed: 0,
            val_fraction: 0.125,
        }
    }
}

impl TrainConfig {
    /// A zero rate is accepted and leaves the parameters unchanged.
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(MattError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(MattError::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(MattError::Config("batch size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(MattError::Config(format!(
                "validation fraction {} is outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRecord>,
    pub best_iteration: usize,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_iteration - 1].val_loss
    }
}

/// `iteration,train_loss,val_loss` records, one per line.
pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut out = String::from("iteration,train_loss,val_loss\n");
    for h in history {
        out.push_str(&format!("{},{:?},{:?}\n", h.iteration, h.train_loss, h.val_loss));
    }
    out
}

/// Per-class seeded split; the validation part gets `round(n_c · fraction)`
/// trials of each class. Both index lists are ascending.
pub fn split_indices(labels: &[usize], classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(MattError::Config(format!("split fraction {fraction} is outside (0, 1)")));
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        let n_val = (members.len() as f64 * fraction).round() as usize;
        if n_val == 0 || n_val == members.len() {
            return Err(MattError::Stratification(format!(
                "class {class} has {} trials, too few to split at fraction {fraction}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Stratified `(train, validation)` split.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let labels: Vec<usize> = dataset.trials.iter().map(|t| t.label).collect();
    let (tr, va) = split_indices(&labels, dataset.header.classes, fraction, seed)?;
    Ok((dataset.subset(&tr), dataset.subset(&va)))
}

fn apply_step(params: &mut ParamRegistry, grads: &BTreeMap<String, nalgebra::DMatrix<f64>>, lr: f64) -> Result<()> {
    for (name, p) in params.euclidean.iter_mut() {
        if let Some(g) = grads.get(name) {
            *p -= g * lr;
        }
    }
    for (name, w) in params.stiefel.iter_mut() {
        if let Some(g) = grads.get(name) {
            *w = stiefel_step(w, g, lr)?;
        }
    }
    Ok(())
}

/// Train from an explicit split.
pub fn train_split(train: &[Trial], val: &[Trial], cfg: &MattConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    cfg.validate()?;
    if train.len() < tc.batch_size {
        return Err(MattError::Config(format!(
            "{} training trials is fewer than the batch size {}",
            train.len(),
            tc.batch_size
        )));
    }
    if val.is_empty() {
        return Err(MattError::EmptyInput("validation set is empty".into()));
    }
    let mut params = ParamRegistry::init(cfg)?;
    let mut rng = seeded_rng(tc.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(tc.iterations);
    let mut best: Option<(usize, f64, ParamRegistry)> = None;

    for iteration in 1..=tc.iterations {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Trial> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = loss_and_grads(&batch, &params, cfg)?;
            if !loss.is_finite() || grads.values().any(|g| !g.iter().all(|x| x.is_finite())) {
                return Err(MattError::Divergence { iteration, loss });
            }
            total += loss * batch.len() as f64;
            apply_step(&mut params, &grads, tc.lr).map_err(|_| MattError::Divergence { iteration, loss })?;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = mean_loss(val, &params, cfg)?;
        if !val_loss.is_finite() {
            return Err(MattError::Divergence {
                iteration,
                loss: val_loss,
            });
        }
        history.push(HistoryRecord {
            iteration,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((iteration, val_loss, params.clone()));
        }
    }
    let (best_iteration, _, best_params) = best.expect("at least one iteration");
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.clone(), best_params)?,
        history,
        best_iteration,
    })
}

/// Split off a validation part with `tc.val_fraction`, then train.
pub fn train(dataset: &Dataset, cfg: &MattConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    check_label_space(dataset, cfg)?;
    let present = dataset.class_counts().iter().filter(|c| **c > 0).count();
    if present < 2 {
        return Err(MattError::Config("training needs trials from at least 2 classes".into()));
    }
    let (tr, va) = split(dataset, tc.val_fraction, tc.seed)?;
    train_split(&tr.trials, &va.trials, cfg, tc)
}

fn check_label_space(dataset: &Dataset, cfg: &MattConfig) -> Result<()> {
    let h = &dataset.header;
    if h.classes != cfg.classes || h.channels != cfg.channels || h.timepoints != cfg.timepoints {
        return Err(MattError::Contract(format!(
            "model expects {} classes of {}x{} trials, dataset has {} classes of {}x{}",
            cfg.classes, cfg.channels, cfg.timepoints, h.classes, h.channels, h.timepoints
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Present for two-class tasks when both classes occur.
    pub auc: Option<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    /// Mean attention received per epoch; empty without an attention block.
    pub attention_profile: Vec<f64>,
}

/// Area under the ROC curve from average ranks (ties count one half).
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(MattError::Length {
            expected: positive.len(),
            actual: scores.len(),
        });
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MattError::Contract("AUC needs both positive and negative examples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MattError::NonFinite("AUC scores".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Index of the largest entry, the first on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(checkpoint: &Checkpoint, test: &Dataset) -> Result<EvalReport> {
    let cfg = &checkpoint.config;
    check_label_space(test, cfg)?;
    if test.is_empty() {
        return Err(MattError::EmptyInput("test set is empty".into()));
    }
    let outputs: Vec<Result<(Vec<f64>, Option<Vec<f64>>)>> = test
        .trials
        .par_iter()
        .map(|t| {
            let f = forward(t, &checkpoint.params, cfg)?;
            let scores = f.attention.as_ref().map(|a| attention_scores(a).as_slice().to_vec());
            Ok((f.probabilities.as_slice().to_vec(), scores))
        })
        .collect();
    let mut confusion = vec![vec![0usize; cfg.classes]; cfg.classes];
    let mut profile = Vec::new();
    let mut positive_scores = Vec::with_capacity(test.len());
    for (t, out) in test.trials.iter().zip(outputs) {
        let (probs, scores) = out?;
        confusion[t.label][argmax(&probs)] += 1;
        if cfg.classes == 2 {
            positive_scores.push(probs[1]);
        }
        if let Some(s) = scores {
            if profile.is_empty() {
                profile = vec![0.0; s.len()];
            }
            for (acc, v) in profile.iter_mut().zip(&s) {
                *acc += v;
            }
        }
    }
    for v in profile.iter_mut() {
        *v /= test.len() as f64;
    }
    let correct: usize = (0..cfg.classes).map(|c| confusion[c][c]).sum();
    let labels: Vec<bool> = test.trials.iter().map(|t| t.label == 1).collect();
    let auc = if cfg.classes == 2 {
        auc(&positive_scores, &labels).ok()
    } else {
        None
    };
    Ok(EvalReport {
        accuracy: correct as f64 / test.len() as f64,
        auc,
        confusion,
        attention_profile: profile,
    })
}
