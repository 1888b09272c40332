//! Deterministic mini-batch training and held-out evaluation.

use convsink::tasks::{Task, TrainingSample};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::loss::predictions_correct;
use crate::model::Transformer;
use crate::optim::{cosine_lr, sgd_step, Adam, OptimizerKind};
use crate::params::{lit, Params, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
    pub warmup: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { lr: 5e-5, steps: 1000, optimizer: OptimizerKind::Adam, warmup: 0, batch_size: 1, grad_clip: None }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(ModelError::Validation("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Validation("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ModelError::Validation("lr must be positive and finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracy {
    pub task: Task,
    pub samples: usize,
    pub tokens: usize,
    /// Fraction of predict positions whose argmax is correct.
    pub token_accuracy: f64,
    /// Same, excluding positions whose target is the end-of-utterance token.
    pub payload_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    pub final_loss: f64,
    pub held_out: Vec<TaskAccuracy>,
}

impl TrainReport {
    pub fn accuracy(&self, task: Task) -> Option<&TaskAccuracy> {
        self.held_out.iter().find(|a| a.task == task)
    }
}

/// Per-task accuracy of `model` on `samples`. `eou` identifies targets
/// excluded from the payload accuracy.
pub fn evaluate<T: Scalar>(model: &Transformer<T>, samples: &[TrainingSample], eou: u32) -> Result<Vec<TaskAccuracy>> {
    let mut out: Vec<(TaskAccuracy, usize, usize, usize)> = Vec::new();
    for s in samples {
        let logits = model.forward(&s.ids, &s.mask)?;
        let correct = predictions_correct(&logits, &s.ids, &s.predict)?;
        let idx = match out.iter().position(|(a, ..)| a.task == s.task) {
            Some(i) => i,
            None => {
                let acc = TaskAccuracy { task: s.task, samples: 0, tokens: 0, token_accuracy: 0.0, payload_accuracy: 0.0 };
                out.push((acc, 0, 0, 0));
                out.len() - 1
            }
        };
        let (acc, hits, payload, payload_hits) = &mut out[idx];
        acc.samples += 1;
        for (&p, &ok) in s.predict.iter().zip(&correct) {
            acc.tokens += 1;
            *hits += ok as usize;
            if s.ids[p] != eou {
                *payload += 1;
                *payload_hits += ok as usize;
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|(mut acc, hits, payload, payload_hits)| {
            acc.token_accuracy = hits as f64 / acc.tokens.max(1) as f64;
            acc.payload_accuracy = payload_hits as f64 / payload.max(1) as f64;
            acc
        })
        .collect())
}

/// Trains `model` in place, drawing `batch_size` samples per step from `data`.
pub fn train<T: Scalar>(
    model: &mut Transformer<T>,
    data: &mut dyn Iterator<Item = TrainingSample>,
    held_out: &[TrainingSample],
    schedule: &Schedule,
    eou: u32,
) -> Result<TrainReport> {
    schedule.validate()?;
    let mut adam = Adam::new(&model.config);
    let mut loss_curve = Vec::with_capacity(schedule.steps);
    let inv = lit::<T>(1.0 / schedule.batch_size as f64);
    for step in 0..schedule.steps {
        let mut grad = Params::zeros(&model.config);
        let mut batch_loss = 0.0;
        for _ in 0..schedule.batch_size {
            let sample = data
                .next()
                .ok_or_else(|| ModelError::Validation(format!("training data exhausted at step {step}")))?;
            let (loss, g) = model.loss_and_grad(&sample.ids, &sample.mask, &sample.predict)?;
            batch_loss += loss.to_f64().unwrap_or(f64::NAN);
            grad.add_scaled(&g, inv);
        }
        batch_loss /= schedule.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(ModelError::DivergenceDetected { step });
        }
        if let Some(clip) = schedule.grad_clip {
            let norm = grad.sum_squares().to_f64().unwrap_or(f64::INFINITY).sqrt();
            if norm > clip {
                grad.scale(lit(clip / norm));
            }
        }
        let lr = cosine_lr(schedule.lr, step, schedule.steps, schedule.warmup);
        match schedule.optimizer {
            OptimizerKind::Adam => adam.step(&mut model.params, &grad, lr),
            OptimizerKind::Sgd => sgd_step(&mut model.params, &grad, lr),
        }
        if step % 100 == 0 {
            log::debug!("step {step} loss {batch_loss:.4} lr {lr:.2e}");
        }
        loss_curve.push(batch_loss);
    }
    let final_loss = *loss_curve.last().expect("steps >= 1");
    Ok(TrainReport { steps: schedule.steps, loss_curve, final_loss, held_out: evaluate(model, held_out, eou)? })
}
