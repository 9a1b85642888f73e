//! Runs the encoder over a few sequences with attention capture on and
//! scores each layer by how much attention lands on the task tokens.

use safl::encoder::{forward_batch, EncoderConfig, ModelState};
use safl::selector::{layer_scores, TaskTokenSpec};
use safl::synthdata::{generate, CorpusSpec};
use safl::tensor::RngStream;

fn main() -> safl::Result<()> {
    let cfg = EncoderConfig::default();
    let model = ModelState::init(&cfg, &mut RngStream::new(3, "model:init"))?;
    let data = generate(&CorpusSpec {
        num_sequences: 8,
        ..CorpusSpec::default()
    })?;
    let seqs: Vec<&[u32]> = data.iter().map(|s| s.tokens.as_slice()).collect();
    let (logits, records) = forward_batch(&model, &seqs, true)?;
    println!("logits {:?}, {} attention records", logits.shape(), records.len());

    let rec = &records[0];
    let row: f64 = (0..rec.seq_len()).map(|j| rec.alpha(1, 0, 0, j)).sum();
    println!("layer 1 head 0 query 0 row sums to {row:.12}");

    // [CLS] sits at position 0 of every sequence
    let scores = layer_scores(&records, &TaskTokenSpec::default())?;
    println!("layer  raw score  normalized");
    for l in 0..scores.num_layers() {
        println!("{:>5}  {:>9.4}  {:>10.5}", l + 1, scores.raw[l], scores.normalized[l]);
    }
    Ok(())
}
