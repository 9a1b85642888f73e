//! Top-K layer selection from attention scores, then magnitude pruning of
//! the selected updates and what each costs on the wire.

use safl::encoder::BlockId;
use safl::fedsim::{LayerDelta, WireFormat};
use safl::selector::{prune_updates, select_top_k, LayerScores, ScoreStatus};
use safl::tensor::RngStream;

fn main() -> safl::Result<()> {
    let raw = vec![3.1, 0.4, 2.2, 2.2, 5.0, 0.9, 1.7, 4.4];
    let scores = LayerScores {
        normalized: raw.iter().map(|r| r / 10.0).collect(),
        raw,
        num_examples: 1,
        status: ScoreStatus::Ok,
    };
    for k in [1, 3, 4, 8] {
        let m = select_top_k(&scores, k)?;
        println!("k={k}: layers {:?}{}", m.layers, if m.tie_at_boundary { " (tie at boundary)" } else { "" });
    }

    let mask = select_top_k(&scores, 3)?;
    let mut rng = RngStream::new(1, "deltas");
    let deltas: Vec<LayerDelta> = mask
        .layers
        .iter()
        .map(|&l| {
            let v = (0..1000).map(|_| rng.normal()).collect();
            LayerDelta::dense(BlockId::Layer(l), v, WireFormat::F32)
        })
        .collect();
    let dense: usize = deltas.iter().map(LayerDelta::byte_size).sum();
    for fraction in [0.15, 0.5, 0.9] {
        let pruned = prune_updates(&deltas, fraction)?;
        let kept: usize = pruned.iter().map(LayerDelta::nonzeros).sum();
        let bytes: usize = pruned.iter().map(LayerDelta::byte_size).sum();
        let enc: Vec<_> = pruned.iter().map(|d| d.encoding).collect();
        println!("prune {fraction}: {kept} of 3000 kept, {bytes} B vs {dense} B dense, {enc:?}");
    }
    Ok(())
}
