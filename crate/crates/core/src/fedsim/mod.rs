//! Federated rounds: profile, select, train locally with the complement
//! frozen, privatize, prune, transmit, aggregate.
//!
//! Every random draw comes from a stream labeled by client, round and
//! purpose, and aggregation runs in client-id order, so results do not
//! depend on how many threads simulate the clients.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, AggregationMode, Aggregated};
pub use comm::{CommLedger, CommRound, Encoding, LayerDelta, WireFormat};
pub use metrics::{evaluate, micro_f1, train_centralized, CentralConfig, Confusion, Metrics};

mod aggregate;
mod comm;
mod metrics;

use crate::encoder::{
    forward_batch, loss_and_grads, BlockId, Blocks, FreezeMask, LrSchedule, ModelState, Optimizer, OptimizerKind,
    TaskMode,
};
use crate::error::{Error, Result};
use crate::privacy::{
    clip_per_block, clip_per_example, privatize_update, ClipGranularity, LedgerEntry, NoisePlacement,
    PrivacyLedger, PrivacyParams,
};
use crate::selector::{
    layer_scores_with, prune_updates, select_top_k, AttentionSide, LayerScores, SelectionMask, TaskTokenSpec,
};
use crate::synthdata::{LabeledSequence, Shards};
use crate::tensor::{l2_norm, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Top-`k` layers by attention mass onto the task tokens.
    Safl { k: usize },
    /// Every layer, every round.
    FedavgFull,
    /// The lowest `bottom_frozen` layers never train.
    StaticLayerSkip { bottom_frozen: usize },
    /// `k` layers drawn uniformly per client and round.
    RandomK { k: usize },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Safl { .. } => "safl",
            Strategy::FedavgFull => "fedavg",
            Strategy::StaticLayerSkip { .. } => "static_skip",
            Strategy::RandomK { .. } => "random_k",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Safl { k } => write!(f, "safl(k={k})"),
            Strategy::FedavgFull => f.write_str("fedavg"),
            Strategy::StaticLayerSkip { bottom_frozen } => write!(f, "static_skip(bottom={bottom_frozen})"),
            Strategy::RandomK { k } => write!(f, "random_k(k={k})"),
        }
    }
}

/// Whether each client keeps its own mask or all adopt a vote.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionScope {
    #[default]
    PerClient,
    /// Every client trains the `k` layers named by the most client masks
    /// (ties to the lower id).
    GlobalVote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub strategy: Strategy,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    /// Local optimizer; its state starts fresh every round.
    pub optimizer: OptimizerKind,
    pub task: TaskMode,
    pub task_tokens: TaskTokenSpec,
    pub attention_side: AttentionSide,
    /// Sequences per client used to profile attention each round.
    pub profile_size: usize,
    pub selection_scope: SelectionScope,
    pub aggregation: AggregationMode,
    /// Embedding and classifier train in every round when set; they never
    /// count toward `k`.
    pub train_embedding: bool,
    pub train_classifier: bool,
    /// Share of selected-layer update entries zeroed before upload.
    pub prune_fraction: f64,
    pub wire: WireFormat,
    pub privacy: PrivacyParams,
    pub seed: u64,
    /// Worker threads for client simulation; 0 uses the global pool.
    pub threads: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Safl { k: 8 },
            local_epochs: 1,
            batch_size: 32,
            lr: LrSchedule {
                base: 2e-5,
                warmup_steps: 0,
            },
            optimizer: OptimizerKind::Sgd,
            task: TaskMode::TokenTagging,
            task_tokens: TaskTokenSpec::default(),
            attention_side: AttentionSide::Key,
            profile_size: 32,
            selection_scope: SelectionScope::PerClient,
            aggregation: AggregationMode::Senders,
            train_embedding: true,
            train_classifier: true,
            prune_fraction: 0.0,
            wire: WireFormat::F64,
            privacy: PrivacyParams::default(),
            seed: 0,
            threads: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self.strategy {
            Strategy::Safl { k } | Strategy::RandomK { k } if k < 1 => {
                return Err(Error::config("k", "must be at least 1"));
            }
            Strategy::StaticLayerSkip { bottom_frozen } if bottom_frozen > num_layers => {
                return Err(Error::config(
                    "bottom_frozen",
                    format!("{bottom_frozen} exceeds the {num_layers} layers"),
                ));
            }
            _ => {}
        }
        if let Strategy::StaticLayerSkip { bottom_frozen } = self.strategy {
            if bottom_frozen == num_layers && !self.train_embedding && !self.train_classifier {
                return Err(Error::config("bottom_frozen", "leaves nothing trainable"));
            }
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.base >= 0.0 && self.lr.base.is_finite()) {
            return Err(Error::config("lr", "must be finite and nonnegative"));
        }
        if self.profile_size == 0 {
            return Err(Error::config("profile_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(Error::config("prune_fraction", "must lie in [0, 1)"));
        }
        self.task_tokens
            .validate()
            .map_err(|e| Error::config("task_tokens", e.to_string()))?;
        if self.privacy.enabled {
            self.privacy.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    /// Indices into the training corpus.
    pub shard: Vec<usize>,
    /// Local optimizer steps taken so far; drives the warmup schedule.
    pub steps_taken: usize,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.shard.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSelection {
    pub client: usize,
    pub layers: Vec<usize>,
    pub tie_at_boundary: bool,
    /// Present when the strategy profiled attention.
    pub scores: Option<LayerScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// 1-based index of the round just completed.
    pub round: usize,
    pub strategy: String,
    /// Mean local training loss per client.
    pub client_losses: Vec<f64>,
    pub client_steps: Vec<usize>,
    pub selections: Vec<ClientSelection>,
    /// Layers no client update reached this round.
    pub unchanged_layers: Vec<usize>,
    pub comm: CommRound,
    pub privacy: Option<LedgerEntry>,
    /// Filled in by the driver when it evaluates after the round.
    pub eval: Option<Metrics>,
}

impl RoundReport {
    pub fn mean_client_loss(&self) -> f64 {
        self.client_losses.iter().sum::<f64>() / self.client_losses.len().max(1) as f64
    }
}

/// One line of the selection trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: usize,
    pub client: usize,
    pub strategy: String,
    pub num_layers: usize,
    pub mask: Vec<usize>,
    pub tie_at_boundary: bool,
    pub raw_scores: Option<Vec<f64>>,
    pub normalized_scores: Option<Vec<f64>>,
    pub num_examples: Option<usize>,
}

impl TraceRecord {
    pub fn from_report(report: &RoundReport, num_layers: usize) -> Vec<TraceRecord> {
        report
            .selections
            .iter()
            .map(|s| TraceRecord {
                round: report.round,
                client: s.client,
                strategy: report.strategy.clone(),
                num_layers,
                mask: s.layers.clone(),
                tie_at_boundary: s.tie_at_boundary,
                raw_scores: s.scores.as_ref().map(|x| x.raw.clone()),
                normalized_scores: s.scores.as_ref().map(|x| x.normalized.clone()),
                num_examples: s.scores.as_ref().map(|x| x.num_examples),
            })
            .collect()
    }
}

/// Appends one JSON object per line.
pub fn append_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let f = File::options()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::format(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

struct Selected {
    mask: SelectionMask,
    scores: Option<LayerScores>,
}

struct ClientOutcome {
    deltas: Vec<LayerDelta>,
    mean_loss: f64,
    steps: usize,
}

/// Server model, clients and ledgers of one simulated federation.
pub struct Federation {
    pub config: FedConfig,
    pub model: ModelState,
    pub clients: Vec<ClientState>,
    pub comm: CommLedger,
    pub privacy: PrivacyLedger,
    train: Vec<LabeledSequence>,
    round: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    pub fn new(config: FedConfig, model: ModelState, train: Vec<LabeledSequence>, shards: Shards) -> Result<Self> {
        config.validate(model.config.num_layers)?;
        if shards.is_empty() {
            return Err(Error::Input("a federation needs at least one client".into()));
        }
        let mut seen = vec![false; train.len()];
        for (c, shard) in shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::Input(format!("client {c} has an empty shard")));
            }
            for &i in shard {
                match seen.get_mut(i) {
                    None => return Err(Error::Input(format!("client {c} holds index {i} past the corpus"))),
                    Some(true) => return Err(Error::Input(format!("index {i} is in two shards"))),
                    Some(s) => *s = true,
                }
            }
        }
        let pool = (config.threads > 0)
            .then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::config("threads", e.to_string()))
            })
            .transpose()?;
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, shard)| ClientState {
                id,
                shard,
                steps_taken: 0,
            })
            .collect();
        Ok(Self {
            config,
            model,
            clients,
            comm: CommLedger::default(),
            privacy: PrivacyLedger::new(),
            train,
            round: 0,
            pool,
        })
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn train_data(&self) -> &[LabeledSequence] {
        &self.train
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    fn stream(&self, client: usize, purpose: &str) -> RngStream {
        RngStream::new(
            self.config.seed,
            format!("client:{client}:round:{}:{purpose}", self.round + 1),
        )
    }

    fn select(&self, client: &ClientState) -> Result<Selected> {
        let l = self.model.config.num_layers;
        let plain = |mask| Ok(Selected { mask, scores: None });
        match self.config.strategy {
            Strategy::FedavgFull => plain(SelectionMask::all(l)),
            Strategy::StaticLayerSkip { bottom_frozen } => plain(SelectionMask {
                layers: (bottom_frozen + 1..=l).collect(),
                tie_at_boundary: false,
            }),
            Strategy::RandomK { k } => {
                let mut rng = self.stream(client.id, "random");
                let mut layers: Vec<usize> = sample(&mut rng, l, k.min(l)).into_iter().map(|i| i + 1).collect();
                layers.sort_unstable();
                plain(SelectionMask {
                    layers,
                    tie_at_boundary: false,
                })
            }
            Strategy::Safl { k } => {
                let mut rng = self.stream(client.id, "profile");
                let take = self.config.profile_size.min(client.shard.len());
                let picks = rng.permutation(client.shard.len());
                let seqs: Vec<&[u32]> = picks[..take]
                    .iter()
                    .map(|&p| self.train[client.shard[p]].tokens.as_slice())
                    .collect();
                let (_, records) = forward_batch(&self.model, &seqs, true)?;
                let scores = layer_scores_with(&records, &self.config.task_tokens, self.config.attention_side)?;
                let mask = select_top_k(&scores, k)?;
                Ok(Selected {
                    mask,
                    scores: Some(scores),
                })
            }
        }
    }

    fn freeze_mask(&self, mask: &SelectionMask) -> FreezeMask {
        FreezeMask::layers(
            self.model.config.num_layers,
            &mask.layers,
            self.config.train_embedding,
            self.config.train_classifier,
        )
    }

    fn local_train(&self, client: &ClientState, mask: &FreezeMask) -> Result<ClientOutcome> {
        let cfg = &self.config;
        let dp_client = cfg.privacy.enabled && cfg.privacy.placement == NoisePlacement::Client;
        let mut local = self.model.clone();
        let mut opt = Optimizer::new(cfg.optimizer, local.config.num_layers);
        let mut noise_rng = self.stream(client.id, "noise");
        let mut losses = 0.0;
        let mut steps = 0;
        for epoch in 0..cfg.local_epochs {
            let order = self.stream(client.id, &format!("epoch:{epoch}")).permutation(client.shard.len());
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&LabeledSequence> = chunk.iter().map(|&p| &self.train[client.shard[p]]).collect();
                let step = client.steps_taken + steps + 1;
                let (loss, grads) = if dp_client {
                    self.private_gradient(&local, &batch, mask, &mut noise_rng)?
                } else {
                    loss_and_grads(&local, &batch, mask, cfg.task)?
                };
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        client: client.id,
                        step: steps + 1,
                        loss,
                    });
                }
                opt.step(&mut local, &grads, cfg.lr.lr_at(step))?;
                losses += loss;
                steps += 1;
            }
        }
        if !local.is_finite() {
            return Err(Error::Divergence {
                client: client.id,
                step: steps,
                loss: f64::NAN,
            });
        }
        let mut deltas: Vec<LayerDelta> = self
            .model
            .params
            .ids()
            .filter(|id| mask.is_trainable(*id))
            .map(|id| {
                let values = local
                    .block(id)
                    .iter()
                    .zip(self.model.block(id))
                    .map(|(a, b)| a - b)
                    .collect();
                LayerDelta::dense(id, values, cfg.wire)
            })
            .collect();
        if cfg.privacy.enabled && cfg.privacy.placement == NoisePlacement::Server {
            clip_deltas(&mut deltas, &cfg.privacy);
        }
        if cfg.prune_fraction > 0.0 {
            let (layers, rest): (Vec<_>, Vec<_>) =
                deltas.into_iter().partition(|d| matches!(d.block, BlockId::Layer(_)));
            let mut pruned = prune_updates(&layers, cfg.prune_fraction)?;
            pruned.extend(rest);
            pruned.sort_by_key(|d| d.block);
            deltas = pruned;
        }
        if cfg.wire == WireFormat::F32 {
            for d in &mut deltas {
                d.values.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        Ok(ClientOutcome {
            deltas,
            mean_loss: losses / steps.max(1) as f64,
            steps,
        })
    }

    /// Per-example gradients, clipped, summed, noised and averaged.
    fn private_gradient(
        &self,
        model: &ModelState,
        batch: &[&LabeledSequence],
        mask: &FreezeMask,
        rng: &mut RngStream,
    ) -> Result<(f64, Blocks)> {
        let p = &self.config.privacy;
        let mut sum: Option<Blocks> = None;
        let mut loss = 0.0;
        for ex in batch {
            let (l, g) = loss_and_grads(model, std::slice::from_ref(ex), mask, self.config.task)?;
            loss += l;
            let present: Vec<(BlockId, &[f64])> = g.present().collect();
            let clipped: Vec<Vec<f64>> = match p.clipping {
                ClipGranularity::PerBlock => {
                    clip_per_block(&present.iter().map(|(_, v)| *v).collect::<Vec<_>>(), p.clip_norm)
                }
                ClipGranularity::Global => {
                    let flat: Vec<f64> = present.iter().flat_map(|(_, v)| v.iter().copied()).collect();
                    split_like(&clip_per_example(&flat, p.clip_norm), &present)
                }
            };
            let acc = sum.get_or_insert_with(|| {
                let mut b = Blocks::empty(model.config.num_layers);
                for (id, v) in &present {
                    *b.get_mut(*id) = vec![0.0; v.len()];
                }
                b
            });
            for ((id, _), c) in present.iter().zip(clipped) {
                for (a, v) in acc.get_mut(*id).iter_mut().zip(c) {
                    *a += v;
                }
            }
        }
        let sum = sum.ok_or_else(|| Error::Input("empty batch".into()))?;
        let present: Vec<(BlockId, &[f64])> = sum.present().collect();
        let flat: Vec<f64> = present.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let noised = privatize_update(&flat, batch.len(), p, rng)?;
        let mut out = Blocks::empty(model.config.num_layers);
        for ((id, _), v) in present.iter().zip(split_like(&noised, &present)) {
            *out.get_mut(*id) = v;
        }
        Ok((loss / batch.len() as f64, out))
    }

    /// Runs one full round and advances the server model.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let l = self.model.config.num_layers;
        let selected: Vec<Result<Selected>> =
            self.in_pool(|| self.clients.par_iter().map(|c| self.select(c)).collect());
        let mut selected = selected.into_iter().collect::<Result<Vec<_>>>()?;
        if self.config.selection_scope == SelectionScope::GlobalVote {
            let k = selected[0].mask.layers.len();
            let mut votes = vec![0.0; l];
            for s in &selected {
                for &layer in &s.mask.layers {
                    votes[layer - 1] += 1.0;
                }
            }
            let tally = LayerScores {
                normalized: votes.clone(),
                raw: votes,
                num_examples: selected.len(),
                status: crate::selector::ScoreStatus::Ok,
            };
            let shared = if k == 0 {
                SelectionMask {
                    layers: Vec::new(),
                    tie_at_boundary: false,
                }
            } else {
                select_top_k(&tally, k)?
            };
            for s in &mut selected {
                s.mask = shared.clone();
            }
        }

        let masks: Vec<FreezeMask> = selected.iter().map(|s| self.freeze_mask(&s.mask)).collect();
        let outcomes: Vec<Result<ClientOutcome>> = self.in_pool(|| {
            self.clients
                .par_iter()
                .zip(masks.par_iter())
                .map(|(c, m)| self.local_train(c, m))
                .collect()
        });
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

        let weights: Vec<f64> = self.clients.iter().map(|c| c.num_samples() as f64).collect();
        let deltas: Vec<Vec<LayerDelta>> = outcomes.iter().map(|o| o.deltas.clone()).collect();
        let mut agg = aggregate(&deltas, &weights, self.config.aggregation)?;

        let privacy = if self.config.privacy.enabled {
            let releases = match self.config.privacy.placement {
                NoisePlacement::Client => outcomes.iter().map(|o| o.steps).max().unwrap_or(0),
                NoisePlacement::Server => {
                    self.add_server_noise(&mut agg, &weights);
                    1
                }
            };
            Some(self.privacy.account_releases(&self.config.privacy, releases)?.clone())
        } else {
            None
        };

        for (block, delta) in &agg.blocks {
            for (p, d) in self.model.params.get_mut(*block).iter_mut().zip(delta) {
                *p += d;
            }
        }
        let comm = self.comm_round(&outcomes, &agg);
        self.comm.push(comm.clone());
        for (c, o) in self.clients.iter_mut().zip(&outcomes) {
            c.steps_taken += o.steps;
        }
        self.round += 1;
        let unchanged_layers = (1..=l).filter(|i| !agg.blocks.contains_key(&BlockId::Layer(*i))).collect();
        Ok(RoundReport {
            round: self.round,
            strategy: self.config.strategy.to_string(),
            client_losses: outcomes.iter().map(|o| o.mean_loss).collect(),
            client_steps: outcomes.iter().map(|o| o.steps).collect(),
            selections: selected
                .into_iter()
                .enumerate()
                .map(|(client, s)| ClientSelection {
                    client,
                    layers: s.mask.layers,
                    tie_at_boundary: s.mask.tie_at_boundary,
                    scores: s.scores,
                })
                .collect(),
            unchanged_layers,
            comm,
            privacy,
            eval: None,
        })
    }

    /// Central Gaussian noise on the averaged update. One client moves a
    /// block's weighted mean by at most `C · w_max / Σ w` over its senders.
    fn add_server_noise(&self, agg: &mut Aggregated, weights: &[f64]) {
        let p = &self.config.privacy;
        let mut rng = RngStream::new(self.config.seed, format!("server:round:{}:noise", self.round + 1));
        for (block, values) in agg.blocks.iter_mut() {
            let senders = &agg.senders[block];
            let total: f64 = senders.iter().map(|c| weights[*c]).sum();
            let max = senders.iter().map(|c| weights[*c]).fold(0.0, f64::max);
            let std = p.noise_std() * max / total;
            if std > 0.0 {
                values.iter_mut().for_each(|v| *v += std * rng.normal());
            }
        }
    }

    fn comm_round(&self, outcomes: &[ClientOutcome], agg: &Aggregated) -> CommRound {
        let cfg = &self.model.config;
        let vb = self.config.wire.value_bytes();
        let m = self.clients.len();
        let layer_total = cfg.num_layers * cfg.layer_param_count();
        let mut full = layer_total;
        if self.config.train_embedding {
            full += cfg.param_count(BlockId::Embedding);
        }
        if self.config.train_classifier {
            full += cfg.param_count(BlockId::Classifier);
        }
        let layer_deltas = || {
            outcomes
                .iter()
                .flat_map(|o| o.deltas.iter())
                .filter(|d| matches!(d.block, BlockId::Layer(_)))
        };
        CommRound {
            round: self.round + 1,
            bytes_up: outcomes
                .iter()
                .map(|o| o.deltas.iter().map(LayerDelta::byte_size).sum())
                .collect(),
            bytes_down: agg.blocks.keys().map(|b| cfg.param_count(*b)).sum::<usize>() * vb * m,
            layer_bytes_up: layer_deltas().map(LayerDelta::byte_size).sum(),
            layer_values_up: layer_deltas().map(LayerDelta::transmitted_values).sum(),
            baseline_full_bytes: full * vb * m,
            baseline_layer_bytes: layer_total * vb * m,
        }
    }

    pub fn evaluate(&self, data: &[LabeledSequence]) -> Result<Metrics> {
        evaluate(&self.model, data, self.config.task)
    }

    /// Runs `rounds` rounds, evaluating after each when `eval` is given.
    pub fn run_rounds(&mut self, rounds: usize, eval: Option<&[LabeledSequence]>) -> Result<Vec<RoundReport>> {
        let mut out = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let mut r = self.run_round()?;
            if let Some(data) = eval {
                r.eval = Some(self.evaluate(data)?);
            }
            out.push(r);
        }
        Ok(out)
    }
}

fn split_like(flat: &[f64], like: &[(BlockId, &[f64])]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(like.len());
    let mut at = 0;
    for (_, v) in like {
        out.push(flat[at..at + v.len()].to_vec());
        at += v.len();
    }
    out
}

/// Clips a client's whole round update so one client's influence is at
/// most `C`.
fn clip_deltas(deltas: &mut [LayerDelta], p: &PrivacyParams) {
    match p.clipping {
        ClipGranularity::Global => {
            let norm = l2_norm(&deltas.iter().flat_map(|d| d.values.iter().copied()).collect::<Vec<_>>());
            if norm > p.clip_norm {
                let s = p.clip_norm / norm;
                deltas.iter_mut().for_each(|d| d.values.iter_mut().for_each(|v| *v *= s));
            }
        }
        ClipGranularity::PerBlock => {
            let views: Vec<&[f64]> = deltas.iter().map(|d| d.values.as_slice()).collect();
            let clipped = clip_per_block(&views, p.clip_norm);
            for (d, c) in deltas.iter_mut().zip(clipped) {
                d.values = c;
            }
        }
    }
}
