//! Trains the same federation with FedAvg, SAFL, random K layers and a
//! static bottom-layer freeze, then compares F1 against bytes sent.
//!
//! cargo run --release --example compare_strategies -- [rounds] [seed]

use safl::cli::{run_experiment, RunConfig, StrategyKind};

fn main() -> safl::Result<()> {
    let mut args = std::env::args().skip(1);
    let rounds = args.next().map_or(20, |a| a.parse().expect("rounds"));
    let seed = args.next().map_or(0, |a| a.parse().expect("seed"));

    println!("{:<16} {:>8} {:>14} {:>10}", "strategy", "F1", "uplink bytes", "reduction");
    for kind in [StrategyKind::Fedavg, StrategyKind::Safl, StrategyKind::RandomK, StrategyKind::StaticSkip] {
        let mut cfg = RunConfig::desk();
        cfg.rounds = rounds;
        cfg.seed = seed;
        cfg.strategy.kind = kind;
        cfg.strategy.bottom_frozen = cfg.encoder.num_layers - cfg.strategy.k;
        let s = run_experiment(&cfg, None)?.summary;
        println!(
            "{:<16} {:>8.4} {:>14} {:>9.1}%",
            s.strategy,
            s.final_f1,
            s.bytes_up,
            100.0 * s.reduction
        );
    }
    Ok(())
}
