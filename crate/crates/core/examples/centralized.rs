//! Pooled, non-federated training of the desk encoder: the reference the
//! federated strategies are measured against.

use safl::cli::{build_data, initial_model, RunConfig};
use safl::encoder::LrSchedule;
use safl::fedsim::{evaluate, train_centralized, CentralConfig};

fn main() -> safl::Result<()> {
    let cfg = RunConfig::desk();
    let (train, eval, _) = build_data(&cfg)?;
    let mut model = initial_model(&cfg)?;
    println!("initial F1 {:.3}", evaluate(&model, &eval, cfg.training.task)?.f1);
    let central = CentralConfig {
        steps: 200,
        batch_size: 32,
        lr: LrSchedule {
            base: 1e-3,
            warmup_steps: 0,
        },
        optimizer: cfg.training.optimizer,
        task: cfg.training.task,
        seed: cfg.seed,
    };
    let losses = train_centralized(&mut model, &train, &central)?;
    for (i, chunk) in losses.chunks(25).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>3}-{:>3}: mean loss {mean:.4}", i * 25 + 1, i * 25 + chunk.len());
    }
    let m = evaluate(&model, &eval, cfg.training.task)?;
    println!("final F1 {:.3} (precision {:.3}, recall {:.3})", m.f1, m.precision, m.recall);
    Ok(())
}
