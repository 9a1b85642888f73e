//! A handful of SAFL rounds on the desk preset, printing what each round
//! selected, sent and learned.

use safl::cli::{build_data, initial_model, RunConfig};
use safl::fedsim::Federation;

fn main() -> safl::Result<()> {
    let cfg = RunConfig::desk();
    let (train, eval, shards) = build_data(&cfg)?;
    let mut fed = Federation::new(cfg.fed_config(), initial_model(&cfg)?, train, shards)?;
    println!("{} clients, strategy {}", fed.clients.len(), fed.config.strategy);
    println!("initial F1 {:.3}", fed.evaluate(&eval)?.f1);

    for _ in 0..5 {
        let r = fed.run_round()?;
        let m = fed.evaluate(&eval)?;
        println!(
            "round {}: loss {:.3}, F1 {:.3}, uplink {} B, layer reduction {:.1}%",
            r.round,
            r.mean_client_loss(),
            m.f1,
            r.comm.total_up(),
            100.0 * r.comm.layer_reduction()
        );
        for s in r.selections.iter().take(3) {
            println!("    client {} trained layers {:?}", s.client, s.layers);
        }
        if !r.unchanged_layers.is_empty() {
            println!("    nobody sent layers {:?}", r.unchanged_layers);
        }
    }
    Ok(())
}
