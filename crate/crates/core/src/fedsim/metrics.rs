use serde::{Deserialize, Serialize};

use crate::encoder::{
    forward_batch, loss_and_grads, FreezeMask, LrSchedule, ModelState, Optimizer, OptimizerKind, TaskMode,
};
use crate::error::{Error, Result};
use crate::synthdata::LabeledSequence;
use crate::tensor::RngStream;

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Micro-averaged F1 over non-background labels.
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Token tagging: share of sequences tagged without error.
    /// Sequence classification: share classified correctly.
    pub accuracy: f64,
    pub loss: f64,
}

/// Micro-averaged precision/recall/F1 counts over labels other than `0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: u32, gold: u32) {
        if predicted == gold {
            if gold != 0 {
                self.true_pos += 1;
            }
            return;
        }
        if predicted != 0 {
            self.false_pos += 1;
        }
        if gold != 0 {
            self.false_neg += 1;
        }
    }

    /// Zero when a denominator vanishes.
    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    /// `2 TP / (2 TP + FP + FN)`. With no positives on either side every
    /// prediction was correct, so this returns 1; otherwise a zero
    /// denominator cannot occur.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.true_pos + self.false_pos + self.false_neg;
        if den == 0 {
            1.0
        } else {
            2.0 * self.true_pos as f64 / den as f64
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn micro_f1(predicted: &[u32], gold: &[u32]) -> f64 {
    let mut c = Confusion::default();
    for (&p, &g) in predicted.iter().zip(gold) {
        c.add(p, g);
    }
    c.f1()
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn cross_entropy(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[target]
}

/// Forward-only evaluation in fixed-size chunks.
pub fn evaluate(model: &ModelState, data: &[LabeledSequence], task: TaskMode) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let nl = model.config.num_labels;
    let mut conf = Confusion::default();
    let mut correct = 0usize;
    let mut loss = 0.0;
    for chunk in data.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let (logits, _) = forward_batch(model, &seqs, false)?;
        let rows = logits.data();
        let mut offset = 0;
        for s in chunk {
            let n = s.tokens.len();
            let seq_rows = &rows[offset * nl..(offset + n) * nl];
            offset += n;
            match task {
                TaskMode::TokenTagging => {
                    let mut all_right = true;
                    let mut seq_loss = 0.0;
                    for (row, &gold) in seq_rows.chunks_exact(nl).zip(&s.labels) {
                        let p = argmax(row);
                        conf.add(p, gold);
                        all_right &= p == gold;
                        seq_loss += cross_entropy(row, gold as usize);
                    }
                    correct += all_right as usize;
                    loss += seq_loss / n as f64;
                }
                TaskMode::SequenceClassification => {
                    let row = &seq_rows[..nl];
                    let gold = s.sequence_label();
                    let p = argmax(row);
                    conf.add(p, gold);
                    correct += (p == gold) as usize;
                    loss += cross_entropy(row, gold as usize);
                }
            }
        }
    }
    let m = data.len() as f64;
    Ok(Metrics {
        f1: conf.f1(),
        precision: conf.precision(),
        recall: conf.recall(),
        accuracy: correct as f64 / m,
        loss: loss / m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentralConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub task: TaskMode,
    pub seed: u64,
}

/// Minibatch training on pooled data, reshuffling each pass. Returns the
/// loss of every step.
pub fn train_centralized(
    model: &mut ModelState,
    data: &[LabeledSequence],
    cfg: &CentralConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Input("centralized training needs data and a positive batch".into()));
    }
    let mask = FreezeMask::all_trainable(model.config.num_layers);
    let mut opt = Optimizer::new(cfg.optimizer, model.config.num_layers);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut order = Vec::new();
    let mut cursor = 0;
    let mut pass = 0;
    for step in 1..=cfg.steps {
        if cursor >= order.len() {
            order = RngStream::new(cfg.seed, format!("central:pass:{pass}")).permutation(data.len());
            cursor = 0;
            pass += 1;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&LabeledSequence> = order[cursor..end].iter().map(|&i| &data[i]).collect();
        cursor = end;
        let (loss, grads) = loss_and_grads(model, &batch, &mask, cfg.task)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { client: 0, step, loss });
        }
        opt.step(model, &grads, cfg.lr.lr_at(step))?;
        losses.push(loss);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        assert_eq!(micro_f1(&[0, 1, 2, 0], &[0, 1, 2, 0]), 1.0);
        assert_eq!(micro_f1(&[0, 0], &[0, 0]), 1.0);
    }

    #[test]
    fn no_predicted_positives() {
        let mut c = Confusion::default();
        for (p, g) in [(0, 1), (0, 2), (0, 0)] {
            c.add(p, g);
        }
        assert_eq!(c.precision(), 0.0);
        assert_eq!(c.recall(), 0.0);
        assert_eq!(c.f1(), 0.0);
    }

    #[test]
    fn wrong_type_counts_both_ways() {
        let mut c = Confusion::default();
        c.add(1, 3);
        assert_eq!((c.true_pos, c.false_pos, c.false_neg), (0, 1, 1));
    }
}
