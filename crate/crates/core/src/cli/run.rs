use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::encoder::{save_checkpoint, ModelState};
use crate::error::{Error, Result};
use crate::fedsim::{append_jsonl, Federation, Metrics, RoundReport, TraceRecord};
use crate::synthdata::{generate_stream, partition, skew_statistic, LabeledSequence, Shards};
use crate::tensor::RngStream;

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TRACE_FILE: &str = "selection_trace.jsonl";
pub const PRIVACY_FILE: &str = "privacy_ledger.json";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const MODEL_FILE: &str = "model.json";

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub initial_f1: f64,
    pub final_f1: f64,
    pub best_f1: f64,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub baseline_bytes: usize,
    pub reduction: f64,
    pub layer_reduction: f64,
    /// Number, or `inf` when σ = 0 with privacy on; empty when off.
    pub epsilon_total: String,
    pub delta_total: f64,
    pub skew: f64,
}

pub struct RunOutcome {
    pub summary: Summary,
    pub reports: Vec<RoundReport>,
    pub model: ModelState,
    pub initial: Metrics,
}

/// Training corpus, held-out set and client shards for a config.
pub fn build_data(cfg: &RunConfig) -> Result<(Vec<LabeledSequence>, Vec<LabeledSequence>, Shards)> {
    let train = generate_stream(&cfg.corpus_spec(), "train")?;
    let eval = generate_stream(&cfg.eval_spec(), "eval")?;
    let shards = partition(&train, &cfg.partition_spec())?;
    Ok((train, eval, shards))
}

pub fn initial_model(cfg: &RunConfig) -> Result<ModelState> {
    ModelState::init(&cfg.encoder, &mut RngStream::new(cfg.seed, "model:init"))
}

fn reset_file(path: &Path) -> Result<()> {
    fs::write(path, b"").map_err(|e| Error::io(path, e))
}

/// Runs a configuration end to end. With `out` set, writes the run's
/// artifacts there as it goes (replacing any from an earlier run).
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train, eval, shards) = build_data(cfg)?;
    let skew = skew_statistic(&train, &shards, cfg.data.num_entity_types);
    let model = initial_model(cfg)?;
    let mut fed = Federation::new(cfg.fed_config(), model, train, shards)?;
    let initial = fed.evaluate(&eval)?;
    log::info!("seed {} strategy {}: initial F1 {:.4}", cfg.seed, fed.config.strategy, initial.f1);

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(dir.join(CONFIG_FILE))?;
        for f in [ROUNDS_FILE, TRACE_FILE] {
            reset_file(&dir.join(f))?;
        }
    }

    let mut reports = Vec::with_capacity(cfg.rounds);
    for r in 1..=cfg.rounds {
        let mut report = fed.run_round()?;
        if r % cfg.eval_every == 0 || r == cfg.rounds {
            report.eval = Some(fed.evaluate(&eval)?);
        }
        if let Some(m) = &report.eval {
            log::info!("round {r}: F1 {:.4} loss {:.4}", m.f1, m.loss);
        }
        if let Some(dir) = out {
            append_jsonl(dir.join(ROUNDS_FILE), std::slice::from_ref(&report))?;
            append_jsonl(dir.join(TRACE_FILE), &TraceRecord::from_report(&report, cfg.encoder.num_layers))?;
        }
        reports.push(report);
    }

    let last = reports.iter().rev().find_map(|r| r.eval).unwrap_or(initial);
    let best_f1 = reports
        .iter()
        .filter_map(|r| r.eval.map(|m| m.f1))
        .fold(initial.f1, f64::max);
    let summary = Summary {
        strategy: fed.config.strategy.to_string(),
        seed: cfg.seed,
        rounds: cfg.rounds,
        initial_f1: initial.f1,
        final_f1: last.f1,
        best_f1,
        final_accuracy: last.accuracy,
        final_loss: last.loss,
        bytes_up: fed.comm.total_up(),
        bytes_down: fed.comm.total_down(),
        baseline_bytes: fed.comm.total_baseline(),
        reduction: fed.comm.reduction(),
        layer_reduction: fed.comm.layer_reduction(),
        epsilon_total: if cfg.privacy.enabled {
            fed.privacy.epsilon_total().to_string()
        } else {
            String::new()
        },
        delta_total: fed.privacy.delta_total(),
        skew,
    };

    if let Some(dir) = out {
        write_summary(&dir.join(SUMMARY_FILE), std::slice::from_ref(&summary))?;
        fed.privacy.write_json(&cfg.privacy.params(), dir.join(PRIVACY_FILE))?;
        save_checkpoint(&fed.model, dir.join(MODEL_FILE))?;
    }
    Ok(RunOutcome {
        summary,
        reports,
        model: fed.model,
        initial,
    })
}

pub fn write_summary(path: &Path, rows: &[Summary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Vec<Summary>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    })?;
    r.deserialize()
        .collect::<std::result::Result<Vec<Summary>, _>>()
        .map_err(|e| Error::format(path, e))
}

/// Resolves the output directory: explicit flag, then the environment
/// override, then the config.
pub fn resolve_out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.or_else(|| std::env::var_os(super::OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone())
}
