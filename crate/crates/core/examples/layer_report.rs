//! Runs a short SAFL experiment into a temporary directory and builds the
//! layer-selection frequency table from its trace file.

use safl::cli::{report_dir, run_experiment, RunConfig};

fn main() -> safl::Result<()> {
    let dir = std::env::temp_dir().join("safl-layer-report");
    let mut cfg = RunConfig::desk();
    cfg.rounds = 10;
    run_experiment(&cfg, Some(&dir))?;
    println!("{}", report_dir(&dir)?);
    Ok(())
}
