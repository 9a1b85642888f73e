//! Sweeps the noise multiplier and reports the privacy-utility trade-off:
//! final F1 and total epsilon for each sigma.

use safl::cli::{sweep, RunConfig, SweepAxis};

fn main() -> safl::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.rounds = 10;
    cfg.output_dir = std::env::temp_dir().join("safl-privacy-sweep");
    let rows = sweep(&cfg, SweepAxis::Sigma, &[0.5, 1.0, 2.0], true)?;
    println!("{:>6} {:>8} {:>10}", "sigma", "F1", "epsilon");
    for r in rows {
        println!("{:>6} {:>8.4} {:>10}", r.value, r.final_f1, r.epsilon_total);
    }
    Ok(())
}
