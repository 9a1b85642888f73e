//! Helpers shared by integration test targets.
#![allow(dead_code)]

pub mod props;

use safl::encoder::{loss_and_grads, BlockId, EncoderConfig, FreezeMask, ModelState, TaskMode};
use safl::synthdata::LabeledSequence;
use safl::tensor::RngStream;

pub const H: f64 = 1e-5;

/// `‖a - n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = safl::tensor::l2_norm(analytic).max(safl::tensor::l2_norm(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        d_model: 8,
        d_ff: 12,
        vocab_size: 20,
        max_seq_len: 8,
        num_labels: 5,
    }
}

pub fn tiny_batch() -> Vec<LabeledSequence> {
    vec![
        LabeledSequence {
            tokens: vec![1, 4, 9, 13, 2],
            labels: vec![0, 1, 2, 0, 3],
        },
        LabeledSequence {
            tokens: vec![1, 17, 4],
            labels: vec![0, 4, 1],
        },
    ]
}

/// Relative error of every block's analytic gradient against central
/// differences on the 2-layer model.
pub fn encoder_gradient_errors(task: TaskMode) -> Vec<(BlockId, f64)> {
    let cfg = tiny_config();
    let model = ModelState::init(&cfg, &mut RngStream::new(6, "init")).unwrap();
    let data = tiny_batch();
    let refs: Vec<&LabeledSequence> = data.iter().collect();
    let mask = FreezeMask::all_trainable(cfg.num_layers);
    let (_, grads) = loss_and_grads(&model, &refs, &mask, task).unwrap();
    let loss_at = |m: &ModelState| loss_and_grads(m, &refs, &mask, task).unwrap().0;
    cfg.block_ids()
        .map(|id| {
            let analytic = grads.get(id).to_vec();
            assert_eq!(analytic.len(), cfg.param_count(id), "{id}");
            let mut numeric = vec![0.0; analytic.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let mut plus = model.clone();
                plus.params.get_mut(id)[i] += H;
                let mut minus = model.clone();
                minus.params.get_mut(id)[i] -= H;
                *slot = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            }
            (id, rel_err(&analytic, &numeric))
        })
        .collect()
}
