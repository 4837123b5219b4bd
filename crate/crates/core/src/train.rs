//! Cross-entropy training with Adam and dropout, plus evaluation.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::data::{batch_indices, Batch, TimedSequence};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_scores, EvalReport};
use crate::model::{Arch, Dropout, HiddenTrace, Model};
use crate::par::{map_ordered, mix_seed, Execution};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 50,
            dropout: 0.2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::validation("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "train.learning_rate",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation("train.dropout", "must lie in [0, 1)"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(
                    format!("train.{name}"),
                    "must lie in [0, 1)",
                ));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::validation("train.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Sum of `-log softmax(logits)[label]` over masked-in rows, times `scale`.
fn masked_nll<'t>(logits: Var<'t>, labels: &[usize], mask: &[bool], scale: f64) -> Result<Var<'t>> {
    let shape = logits.shape();
    let (rows, classes) = (shape[0], shape[1]);
    if labels.len() != rows || mask.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![labels.len(), mask.len()],
        });
    }
    let mut pick = Tensor::zeros(&[rows, classes]);
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m {
            if y >= classes {
                return Err(Error::validation("y", format!("label {y} out of range")));
            }
            pick.data_mut()[i * classes + y] = 1.0;
        }
    }
    let tape = logits.tape();
    logits
        .log_softmax()?
        .mul(tape.constant(pick))?
        .sum()?
        .scale(-scale)
}

/// Mean negative log-likelihood of the true class over valid positions.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], mask: &[bool]) -> Result<Var<'t>> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(Error::contract("cross_entropy over a fully masked batch"));
    }
    masked_nll(logits, labels, mask, 1.0 / valid as f64)
}

/// First and second moment estimates for [`adam_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update from the gradients accumulated on `params`.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.tensors_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradient {
    /// Mean loss over the valid positions of the batch.
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Loss and parameter gradients of one minibatch.
///
/// Each sequence is differentiated on its own tape; the per-sequence
/// gradients are summed in batch order.
pub fn batch_gradient(
    model: &Model,
    batch: &Batch<'_>,
    dropout: f64,
    dropout_seed: u64,
    exec: Execution,
) -> Result<BatchGradient> {
    let valid = batch.valid_count();
    if valid == 0 {
        return Err(Error::contract("cross_entropy over a fully masked batch"));
    }
    let scale = 1.0 / valid as f64;
    let parts = map_ordered(
        exec,
        &batch.sequences,
        |i, seq| -> Result<(f64, Vec<Vec<f64>>)> {
            let tape = Tape::new();
            let vars = model.params().bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(dropout_seed, i as u64));
            let drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut rng,
            });
            let out = model.forward(&tape, &vars, seq, drop)?;
            let mask = &batch.mask[i][..seq.len()];
            let labels = &batch.labels[i][..seq.len()];
            let loss = masked_nll(out.logits, labels, mask, scale)?;
            let grads = tape.gradients(loss)?;
            Ok((loss.item()?, model.params().collect(&vars, &grads)))
        },
    );
    let mut loss = 0.0;
    let mut total: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (acc, gi) in total.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    Ok(BatchGradient { loss, grads: total })
}

/// Applies one Adam update from a freshly computed batch gradient.
pub fn apply_gradient(
    model: &mut Model,
    state: &mut AdamState,
    grad: &BatchGradient,
    cfg: &TrainConfig,
) -> Result<()> {
    let params = model.params_mut();
    params.zero_grads();
    params.accumulate_flat(&grad.grads)?;
    adam_step(params, state, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_weighted_f1: f64,
    /// Seconds since training started; excluded from serialized history.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation weighted F1.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` and keeps the checkpoint with the best validation weighted F1.
///
/// With `per_event` batches never mix events and are fed in dataset order;
/// otherwise sequences are reshuffled every epoch.
pub fn train(
    model: Model,
    train_set: &[TimedSequence],
    val_set: &[TimedSequence],
    cfg: &TrainConfig,
    per_event: bool,
) -> Result<TrainOutcome> {
    train_with(
        model,
        train_set,
        val_set,
        cfg,
        per_event,
        Execution::default(),
    )
}

/// [`train`] with an explicit execution mode; results do not depend on it.
pub fn train_with(
    mut model: Model,
    train_set: &[TimedSequence],
    val_set: &[TimedSequence],
    cfg: &TrainConfig,
    per_event: bool,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let selection = if val_set.is_empty() {
        train_set
    } else {
        val_set
    };
    if model.arch() == Arch::Majority {
        model.fit_majority(train_set)?;
        let f1 = evaluate_with(&model, selection, exec)?.weighted_f1;
        return Ok(TrainOutcome {
            model,
            best_epoch: 0,
            best_val_f1: f1,
            history: Vec::new(),
        });
    }
    let start = Instant::now();
    let mut state = AdamState::new(model.params());
    let mut best: Option<(Model, usize, f64)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        let shuffle = (!per_event).then_some(&mut shuffle_rng);
        let batches = batch_indices(train_set, cfg.batch_size, per_event, shuffle);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let batch = Batch::new(idx.iter().map(|&i| &train_set[i]).collect());
            let seed = mix_seed(mix_seed(cfg.seed ^ 0xD50F, epoch as u64), b as u64);
            let grad = batch_gradient(&model, &batch, cfg.dropout, seed, exec)?;
            if !grad.loss.is_finite() || grad.grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b });
            }
            apply_gradient(&mut model, &mut state, &grad, cfg)?;
            let n = batch.valid_count();
            loss_sum += grad.loss * n as f64;
            count += n;
        }
        let val_f1 = evaluate_with(&model, selection, exec)?.weighted_f1;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / count as f64,
            val_weighted_f1: val_f1,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(_, _, f)| val_f1 > *f) {
            best = Some((model.clone(), epoch, val_f1));
        }
    }
    let (model, best_epoch, best_val_f1) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_f1,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequencePrediction {
    pub event_id: String,
    /// Class probabilities per post.
    pub probs: Vec<Vec<f64>>,
    pub trace: HiddenTrace,
}

/// Inference over many sequences without dropout.
pub fn predict(model: &Model, seqs: &[TimedSequence]) -> Result<Vec<SequencePrediction>> {
    predict_with(model, seqs, Execution::default())
}

pub fn predict_with(
    model: &Model,
    seqs: &[TimedSequence],
    exec: Execution,
) -> Result<Vec<SequencePrediction>> {
    map_ordered(exec, seqs, |_, seq| {
        let (probs, trace) = model.predict_proba(seq)?;
        Ok(SequencePrediction {
            event_id: seq.event_id.clone(),
            probs,
            trace,
        })
    })
    .into_iter()
    .collect()
}

pub fn evaluate(model: &Model, seqs: &[TimedSequence]) -> Result<EvalReport> {
    evaluate_with(model, seqs, Execution::default())
}

pub fn evaluate_with(model: &Model, seqs: &[TimedSequence], exec: Execution) -> Result<EvalReport> {
    let preds = predict_with(model, seqs, exec)?;
    let labels: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.posts.iter().map(|p| p.y))
        .collect();
    let probs: Vec<Vec<f64>> = preds.into_iter().flat_map(|p| p.probs).collect();
    evaluate_scores(
        &labels,
        &probs,
        model.config().num_classes,
        model.count_parameters(),
    )
}
