//! Command-line driver: run configuration, run artifacts, sweeps, layer
//! reports, standalone corpus generation and the bound calculator.

mod config;
mod report;
mod run;

pub use config::*;
pub use report::*;
pub use run::*;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::convergence::{bound, simulate_quadratic, BoundStatus, ConvergenceParams, QuadraticProblem};
use crate::error::{Error, Result};
use crate::synthdata::{write_corpus, write_partition};

#[derive(Debug, Parser)]
#[command(name = "safl", version, about = "Attention-selected layer fine-tuning, simulated", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one federated experiment and write its artifacts.
    Run(RunArgs),
    /// Run once per value of one axis and merge the summaries.
    Sweep(SweepArgs),
    /// Layer-selection frequency table from a run's selection trace.
    Report(ReportArgs),
    /// Write the synthetic corpus, held-out set and client partition.
    GenData(RunArgs),
    /// Contraction bound calculator, optionally checked by simulation.
    Bound(BoundArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Paper-scale defaults (100 rounds, lr 2e-5).
    Default,
    /// Settings the desk encoder learns under in minutes.
    Desk,
}

/// Config file, preset and per-field overrides. Flags win over the file.
#[derive(Clone, Debug, Default, Args)]
pub struct RunArgs {
    /// TOML config file; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting point when no config file is given.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Output directory (overrides the config and the environment).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyKind>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bottom_frozen: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub train_sequences: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Enables privacy with this noise multiplier.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub prune: Option<f64>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(Preset::Desk)) => RunConfig::desk(),
            (None, _) => RunConfig::default(),
        };
        if let Some(v) = self.strategy {
            c.strategy.kind = v;
        }
        if let Some(v) = self.k {
            c.strategy.k = v;
        }
        if let Some(v) = self.bottom_frozen {
            c.strategy.bottom_frozen = v;
        }
        if let Some(v) = self.rounds {
            c.rounds = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.clients {
            c.data.num_clients = v;
        }
        if let Some(v) = self.alpha {
            c.data.dirichlet_alpha = v;
        }
        if let Some(v) = self.train_sequences {
            c.data.train_sequences = v;
        }
        if let Some(v) = self.batch_size {
            c.training.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.training.lr = v;
        }
        if let Some(v) = self.warmup_steps {
            c.training.warmup_steps = v;
        }
        if let Some(v) = self.layers {
            c.encoder.num_layers = v;
        }
        if let Some(v) = self.sigma {
            c.privacy.enabled = true;
            c.privacy.noise_multiplier = v;
        }
        if let Some(v) = self.clip_norm {
            c.privacy.clip_norm = v;
        }
        if let Some(v) = self.delta {
            c.privacy.delta = v;
        }
        if let Some(v) = self.prune {
            c.comm.prune_fraction = v;
        }
        if let Some(v) = self.threads {
            c.training.threads = v;
        }
        c.output_dir = resolve_out_dir(self.out.clone(), &c);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Sigma,
    Alpha,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    /// Reuse run directories that already exist.
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ReportArgs {
    pub run_dir: PathBuf,
    /// Also write the band table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct BoundArgs {
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    /// Smoothness constant.
    #[arg(long, default_value_t = 1.0)]
    pub smooth: f64,
    #[arg(long, default_value_t = 24)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 50)]
    pub rounds: usize,
    #[arg(long, default_value_t = 1.0)]
    pub initial_gap: f64,
    /// Also simulate an isotropic quadratic over this many seeds.
    #[arg(long)]
    pub simulate: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub block_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write `round, bound, empirical_mean, std_err` here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// One row of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub strategy: String,
    pub seed: u64,
    pub final_f1: f64,
    pub best_f1: f64,
    pub bytes_up: usize,
    pub reduction: f64,
    pub epsilon_total: String,
    pub skew: f64,
}

fn apply_axis(cfg: &mut RunConfig, axis: SweepAxis, value: f64) -> Result<()> {
    match axis {
        SweepAxis::K => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::config("values", format!("k = {value} is not a positive integer")));
            }
            cfg.strategy.k = value as usize;
        }
        SweepAxis::Sigma => {
            cfg.privacy.enabled = true;
            cfg.privacy.noise_multiplier = value;
        }
        SweepAxis::Alpha => cfg.data.dirichlet_alpha = value,
    }
    Ok(())
}

fn axis_name(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::K => "k",
        SweepAxis::Sigma => "sigma",
        SweepAxis::Alpha => "alpha",
    }
}

/// One run per value under `<out>/<axis>=<value>`, merged into
/// `<out>/sweep.csv`. Refuses to touch existing run directories unless
/// `force`.
pub fn sweep(base: &RunConfig, axis: SweepAxis, values: &[f64], force: bool) -> Result<Vec<SweepRow>> {
    let out = &base.output_dir;
    let mut plans = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        apply_axis(&mut cfg, axis, v)?;
        cfg.output_dir = out.join(format!("{}={v}", axis_name(axis)));
        cfg.validate()?;
        if cfg.output_dir.exists() && !force {
            return Err(Error::config(
                "out",
                format!("{} already exists (pass --force to overwrite)", cfg.output_dir.display()),
            ));
        }
        if plans.iter().any(|(_, c): &(f64, RunConfig)| c.output_dir == cfg.output_dir) {
            return Err(Error::config("values", format!("{v} appears twice")));
        }
        plans.push((v, cfg));
    }
    let mut rows = Vec::with_capacity(plans.len());
    for (v, cfg) in plans {
        let s = run_experiment(&cfg, Some(&cfg.output_dir))?.summary;
        rows.push(SweepRow {
            axis,
            value: v,
            strategy: s.strategy,
            seed: s.seed,
            final_f1: s.final_f1,
            best_f1: s.best_f1,
            bytes_up: s.bytes_up,
            reduction: s.reduction,
            epsilon_total: s.epsilon_total,
            skew: s.skew,
        });
    }
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::format(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Writes `corpus.jsonl`, `eval.jsonl`, `partition.json` and the config.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, eval, shards) = build_data(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_corpus(&train, out.join("corpus.jsonl"))?;
    write_corpus(&eval, out.join("eval.jsonl"))?;
    write_partition(&shards, out.join("partition.json"))?;
    cfg.save(out.join(CONFIG_FILE))
}

fn run_bound(a: &BoundArgs) -> Result<()> {
    let p = ConvergenceParams {
        eta: a.eta,
        mu: a.mu,
        smooth_l: a.smooth,
        num_layers: a.layers,
        k: a.k,
        rounds: a.rounds,
        initial_gap: a.initial_gap,
    };
    let b = bound(&p)?;
    println!("factor 1 - eta*mu*K/L = {:.6}", b.factor);
    if b.status == BoundStatus::NonContractive {
        println!("warning: factor outside [0, 1), the bound does not contract");
    }
    match a.simulate {
        None => {
            for (t, g) in b.gaps.iter().enumerate() {
                println!("{t}\t{g:.6e}");
            }
            if let Some(path) = &a.csv {
                let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e))?;
                w.write_record(["round", "bound"]).map_err(|e| Error::format(path, e))?;
                for (t, g) in b.gaps.iter().enumerate() {
                    w.write_record(&[t.to_string(), g.to_string()])
                        .map_err(|e| Error::format(path, e))?;
                }
                w.flush().map_err(|e| Error::io(path, e))?;
            }
        }
        Some(seeds) => {
            let q = QuadraticProblem::isotropic(a.layers, a.block_dim, a.mu);
            let sim = simulate_quadratic(&p, &q, seeds, a.seed)?;
            println!("round\tbound\tempirical\tstd_err");
            for r in &sim.rounds {
                println!("{}\t{:.6e}\t{:.6e}\t{:.2e}", r.round, r.bound, r.mean_gap, r.std_err);
            }
            if sim.diverged_seeds > 0 {
                println!("{} of {} seeds diverged", sim.diverged_seeds, sim.seeds);
            }
            if let Some(path) = &a.csv {
                sim.write_csv(path)?;
            }
        }
    }
    Ok(())
}

fn print_summary(s: &Summary) {
    println!(
        "seed {} {}: F1 {:.4} -> {:.4} (best {:.4}), uplink {} B, reduction {:.2}% (layers {:.2}%){}",
        s.seed,
        s.strategy,
        s.initial_f1,
        s.final_f1,
        s.best_f1,
        s.bytes_up,
        100.0 * s.reduction,
        100.0 * s.layer_reduction,
        if s.epsilon_total.is_empty() {
            String::new()
        } else {
            format!(", epsilon {}", s.epsilon_total)
        }
    );
}

/// Runs one parsed command.
pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(a) => {
            let cfg = a.resolve()?;
            let out = run_experiment(&cfg, Some(&cfg.output_dir))?;
            print_summary(&out.summary);
            println!("artifacts in {}", cfg.output_dir.display());
        }
        Command::Sweep(a) => {
            let cfg = a.run.resolve()?;
            let rows = sweep(&cfg, a.axis, &a.values, a.force)?;
            println!("{:>10} {:>8} {:>12} {:>10} {:>8}", axis_name(a.axis), "F1", "bytes", "epsilon", "skew");
            for r in rows {
                println!(
                    "{:>10} {:>8.4} {:>12} {:>10} {:>8.4}",
                    r.value,
                    r.final_f1,
                    r.bytes_up,
                    if r.epsilon_total.is_empty() { "-" } else { &r.epsilon_total },
                    r.skew
                );
            }
            println!("merged table in {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Report(a) => {
            let rep = report_dir(&a.run_dir)?;
            println!("{rep}");
            if let Some(path) = &a.csv {
                write_report_csv(&rep, path)?;
            }
        }
        Command::GenData(a) => {
            let cfg = a.resolve()?;
            gen_data(&cfg, &cfg.output_dir)?;
            println!(
                "{} training and {} held-out sequences over {} clients in {}",
                cfg.data.train_sequences,
                cfg.data.eval_sequences,
                cfg.data.num_clients,
                cfg.output_dir.display()
            );
        }
        Command::Bound(a) => run_bound(&a)?,
    }
    Ok(())
}

/// Parses `args`, runs, and maps the outcome to a process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
