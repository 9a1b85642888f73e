//! Generates the synthetic tagged corpus, splits it across clients with a
//! Dirichlet prior and shows how label skew grows as alpha shrinks.
//!
//! cargo run --release --example generate_corpus

use safl::synthdata::{entity_histograms, generate, partition, skew_statistic, CorpusSpec, PartitionSpec};

fn main() -> safl::Result<()> {
    let spec = CorpusSpec::default();
    let corpus = generate(&spec)?;
    let ex = &corpus[0];
    println!("{} sequences, {} labels", corpus.len(), spec.num_labels());
    println!("first tokens {:?}", ex.tokens);
    println!("first labels {:?}", ex.labels);

    for alpha in [0.1, 1.0, 100.0] {
        let shards = partition(
            &corpus,
            &PartitionSpec {
                num_clients: 10,
                dirichlet_alpha: alpha,
                seed: 7,
            },
        )?;
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let skew = skew_statistic(&corpus, &shards, spec.num_entity_types);
        println!("alpha {alpha:>6}: shard sizes {sizes:?}, skew {skew:.3}");
        if alpha == 0.1 {
            for (c, h) in entity_histograms(&corpus, &shards, spec.num_entity_types).iter().take(3).enumerate() {
                println!("    client {c} entity mix {h:.2?}");
            }
        }
    }
    Ok(())
}
