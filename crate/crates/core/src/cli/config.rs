use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, LrSchedule, OptimizerKind, TaskMode};
use crate::error::{Error, Result};
use crate::fedsim::{AggregationMode, FedConfig, SelectionScope, Strategy, WireFormat};
use crate::privacy::{ClipGranularity, NoisePlacement, PrivacyParams};
use crate::selector::{AttentionSide, TaskTokenSpec};
use crate::synthdata::{CorpusSpec, PartitionSpec};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "SAFL_OUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    #[default]
    Safl,
    Fedavg,
    StaticSkip,
    RandomK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Layers per round for `safl` and `random_k`.
    pub k: usize,
    /// Frozen bottom layers for `static_skip`.
    pub bottom_frozen: usize,
    pub scope: SelectionScope,
    pub aggregation: AggregationMode,
    pub task_tokens: TaskTokenSpec,
    pub attention_side: AttentionSide,
    pub profile_size: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Safl,
            k: 8,
            bottom_frozen: 0,
            scope: SelectionScope::PerClient,
            aggregation: AggregationMode::Senders,
            task_tokens: TaskTokenSpec::default(),
            attention_side: AttentionSide::Key,
            profile_size: 32,
        }
    }
}

impl StrategyConfig {
    pub fn strategy(&self) -> Strategy {
        match self.kind {
            StrategyKind::Safl => Strategy::Safl { k: self.k },
            StrategyKind::Fedavg => Strategy::FedavgFull,
            StrategyKind::StaticSkip => Strategy::StaticLayerSkip {
                bottom_frozen: self.bottom_frozen,
            },
            StrategyKind::RandomK => Strategy::RandomK { k: self.k },
        }
    }
}

/// Synthetic corpus and its split. Seeds come from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub eval_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_entity_types: usize,
    pub entity_vocab: usize,
    pub entity_density: f64,
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusSpec::default();
        Self {
            train_sequences: c.num_sequences,
            eval_sequences: 100,
            min_len: c.min_len,
            max_len: c.max_len,
            num_entity_types: c.num_entity_types,
            entity_vocab: c.entity_vocab,
            entity_density: c.entity_density,
            num_clients: 10,
            dirichlet_alpha: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub local_epochs: usize,
    pub optimizer: OptimizerKind,
    pub task: TaskMode,
    pub train_embedding: bool,
    pub train_classifier: bool,
    /// Client-simulation threads; 0 uses every core.
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 2e-5,
            warmup_steps: 0,
            local_epochs: 1,
            optimizer: OptimizerKind::adam(),
            task: TaskMode::TokenTagging,
            train_embedding: true,
            train_classifier: true,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub placement: NoisePlacement,
    pub clipping: ClipGranularity,
    /// The budget this run is meant to be read against. A label only: σ
    /// and δ set the noise, the ledger reports the resulting ε.
    pub epsilon_target: f64,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        let p = PrivacyParams::default();
        Self {
            enabled: p.enabled,
            clip_norm: p.clip_norm,
            noise_multiplier: p.noise_multiplier,
            delta: p.delta,
            placement: p.placement,
            clipping: p.clipping,
            epsilon_target: 4.0,
        }
    }
}

impl PrivacyConfig {
    pub fn params(&self) -> PrivacyParams {
        PrivacyParams {
            enabled: self.enabled,
            clip_norm: self.clip_norm,
            noise_multiplier: self.noise_multiplier,
            delta: self.delta,
            placement: self.placement,
            clipping: self.clipping,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommConfig {
    pub prune_fraction: f64,
    pub wire: WireFormat,
}

/// Everything one run needs. Missing keys take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Evaluate every this many rounds (and always after the last).
    pub eval_every: usize,
    pub output_dir: PathBuf,
    pub strategy: StrategyConfig,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub privacy: PrivacyConfig,
    pub comm: CommConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 100,
            eval_every: 1,
            output_dir: PathBuf::from("runs/latest"),
            strategy: StrategyConfig::default(),
            encoder: EncoderConfig::default(),
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            privacy: PrivacyConfig::default(),
            comm: CommConfig::default(),
        }
    }
}

impl RunConfig {
    /// A configuration the desk encoder learns in a few minutes: more
    /// sequences, shorter ones, a small local batch and a from-scratch
    /// learning rate, 50 rounds.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.rounds = 50;
        c.eval_every = 5;
        c.data.train_sequences = 600;
        c.data.min_len = 6;
        c.data.max_len = 12;
        c.training.batch_size = 16;
        c.training.lr = 1e-3;
        c.strategy.k = c.encoder.num_layers / 3;
        c
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config file", e.to_string().trim_end()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            vocab_size: self.encoder.vocab_size,
            num_sequences: self.data.train_sequences,
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            num_entity_types: self.data.num_entity_types,
            entity_vocab: self.data.entity_vocab,
            entity_density: self.data.entity_density,
            seed: self.seed,
        }
    }

    pub fn eval_spec(&self) -> CorpusSpec {
        CorpusSpec {
            num_sequences: self.data.eval_sequences,
            ..self.corpus_spec()
        }
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.data.num_clients,
            dirichlet_alpha: self.data.dirichlet_alpha,
            seed: self.seed,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            strategy: self.strategy.strategy(),
            local_epochs: self.training.local_epochs,
            batch_size: self.training.batch_size,
            lr: LrSchedule {
                base: self.training.lr,
                warmup_steps: self.training.warmup_steps,
            },
            optimizer: self.training.optimizer,
            task: self.training.task,
            task_tokens: self.strategy.task_tokens.clone(),
            attention_side: self.strategy.attention_side,
            profile_size: self.strategy.profile_size,
            selection_scope: self.strategy.scope,
            aggregation: self.strategy.aggregation,
            train_embedding: self.training.train_embedding,
            train_classifier: self.training.train_classifier,
            prune_fraction: self.comm.prune_fraction,
            wire: self.comm.wire,
            privacy: self.privacy.params(),
            seed: self.seed,
            threads: self.training.threads,
        }
    }

    /// Checks every section, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let spec = self.corpus_spec();
        spec.validate()?;
        if spec.num_labels() != self.encoder.num_labels && self.training.task == TaskMode::TokenTagging {
            return Err(Error::config(
                "encoder.num_labels",
                format!(
                    "{} labels but the corpus uses {} (background plus B/I per entity type)",
                    self.encoder.num_labels,
                    spec.num_labels()
                ),
            ));
        }
        if self.data.max_len > self.encoder.max_seq_len {
            return Err(Error::config("data.max_len", "exceeds encoder.max_seq_len"));
        }
        if self.data.eval_sequences == 0 {
            return Err(Error::config("data.eval_sequences", "must be at least 1"));
        }
        if self.data.num_clients == 0 || self.data.num_clients > self.data.train_sequences {
            return Err(Error::config("data.num_clients", "need 1 <= clients <= train_sequences"));
        }
        if !(self.data.dirichlet_alpha > 0.0 && self.data.dirichlet_alpha.is_finite()) {
            return Err(Error::config("data.dirichlet_alpha", "must be positive and finite"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if matches!(self.strategy.kind, StrategyKind::Safl | StrategyKind::RandomK) && self.strategy.k == 0 {
            return Err(Error::config("strategy.k", "must be at least 1"));
        }
        if self.privacy.enabled {
            self.privacy.params().validate()?;
        }
        self.fed_config().validate(self.encoder.num_layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::desk();
        c.privacy.enabled = true;
        c.strategy.task_tokens = TaskTokenSpec::TokenIds([1, 5].into());
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn partial_sections_take_defaults() {
        let c = RunConfig::from_toml_str("rounds = 3\n[strategy]\nkind = \"fedavg\"\n").unwrap();
        assert_eq!(c.rounds, 3);
        assert_eq!(c.strategy.kind, StrategyKind::Fedavg);
        assert_eq!(c.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = RunConfig::from_toml_str("roundz = 3\n").unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        assert!(e.to_string().contains("roundz"));
    }

    #[test]
    fn invalid_values_name_the_field() {
        let mut c = RunConfig::default();
        c.comm.prune_fraction = 1.5;
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("prune_fraction"), "{e}");
        let mut c = RunConfig::default();
        c.data.dirichlet_alpha = 0.0;
        assert!(c.validate().unwrap_err().to_string().contains("dirichlet_alpha"));
    }
}
