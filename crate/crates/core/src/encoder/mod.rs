//! Small bidirectional post-LN transformer encoder.
//!
//! Parameters live in flat per-block buffers: one embedding block, one block
//! per transformer layer (ids `1..=L`) and one classifier block. Blocks are
//! the unit of freezing, transmission and aggregation.

mod checkpoint;
mod forward;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{forward, forward_batch, loss_and_grads, AttentionRecord};
pub use optim::{sgd_step, LrSchedule, Optimizer, OptimizerKind};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Token id reserved for the classification token at position 0.
pub const CLS_TOKEN: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_labels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            num_heads: 4,
            d_model: 64,
            d_ff: 128,
            vocab_size: 256,
            max_seq_len: 64,
            num_labels: 7,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_labels", self.num_labels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name}"), "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "encoder.d_model",
                format!(
                    "{} is not divisible by num_heads = {}",
                    self.d_model, self.num_heads
                ),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn layout(&self, block: BlockId) -> Vec<ParamSpec> {
        let (d, f) = (self.d_model, self.d_ff);
        let spec = |name: &'static str, shape: &[usize]| ParamSpec {
            name,
            shape: shape.to_vec(),
        };
        match block {
            BlockId::Embedding => vec![
                spec("tok", &[self.vocab_size, d]),
                spec("pos", &[self.max_seq_len, d]),
            ],
            BlockId::Layer(_) => vec![
                spec("wq", &[d, d]),
                spec("bq", &[d]),
                spec("wk", &[d, d]),
                spec("bk", &[d]),
                spec("wv", &[d, d]),
                spec("bv", &[d]),
                spec("wo", &[d, d]),
                spec("bo", &[d]),
                spec("ln1_g", &[d]),
                spec("ln1_b", &[d]),
                spec("w1", &[d, f]),
                spec("b1", &[f]),
                spec("w2", &[f, d]),
                spec("b2", &[d]),
                spec("ln2_g", &[d]),
                spec("ln2_b", &[d]),
            ],
            BlockId::Classifier => vec![
                spec("w", &[d, self.num_labels]),
                spec("b", &[self.num_labels]),
            ],
        }
    }

    /// Number of parameters in a block; a pure function of the config.
    pub fn param_count(&self, block: BlockId) -> usize {
        self.layout(block).iter().map(ParamSpec::numel).sum()
    }

    pub fn layer_param_count(&self) -> usize {
        self.param_count(BlockId::Layer(1))
    }

    pub fn total_param_count(&self) -> usize {
        self.block_ids().map(|b| self.param_count(b)).sum()
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> {
        std::iter::once(BlockId::Embedding)
            .chain((1..=self.num_layers).map(BlockId::Layer))
            .chain(std::iter::once(BlockId::Classifier))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Identifies a parameter block. Layer ids are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    Embedding,
    Layer(usize),
    Classifier,
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::Embedding => f.write_str("embedding"),
            BlockId::Layer(l) => write!(f, "layer.{l}"),
            BlockId::Classifier => f.write_str("classifier"),
        }
    }
}

impl std::str::FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(BlockId::Embedding),
            "classifier" => Ok(BlockId::Classifier),
            _ => s
                .strip_prefix("layer.")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n >= 1)
                .map(BlockId::Layer)
                .ok_or_else(|| Error::Input(format!("unknown block name `{s}`"))),
        }
    }
}

/// Flat per-block buffers. Used for parameters, gradients and deltas; a
/// gradient container leaves frozen blocks empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Blocks {
    pub embedding: Vec<f64>,
    pub layers: Vec<Vec<f64>>,
    pub classifier: Vec<f64>,
}

impl Blocks {
    pub fn empty(num_layers: usize) -> Self {
        Self {
            embedding: Vec::new(),
            layers: vec![Vec::new(); num_layers],
            classifier: Vec::new(),
        }
    }

    pub fn zeros_like(config: &EncoderConfig) -> Self {
        Self {
            embedding: vec![0.0; config.param_count(BlockId::Embedding)],
            layers: vec![vec![0.0; config.layer_param_count()]; config.num_layers],
            classifier: vec![0.0; config.param_count(BlockId::Classifier)],
        }
    }

    pub fn get(&self, id: BlockId) -> &[f64] {
        match id {
            BlockId::Embedding => &self.embedding,
            BlockId::Layer(l) => &self.layers[l - 1],
            BlockId::Classifier => &self.classifier,
        }
    }

    pub fn get_mut(&mut self, id: BlockId) -> &mut Vec<f64> {
        match id {
            BlockId::Embedding => &mut self.embedding,
            BlockId::Layer(l) => &mut self.layers[l - 1],
            BlockId::Classifier => &mut self.classifier,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        std::iter::once(BlockId::Embedding)
            .chain((1..=self.layers.len()).map(BlockId::Layer))
            .chain(std::iter::once(BlockId::Classifier))
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockId, &[f64])> {
        self.ids().map(move |id| (id, self.get(id)))
    }

    /// Blocks with at least one entry.
    pub fn present(&self) -> impl Iterator<Item = (BlockId, &[f64])> {
        self.iter().filter(|(_, v)| !v.is_empty())
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, v)| v.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub config: EncoderConfig,
    pub params: Blocks,
}

impl ModelState {
    /// Random initialization: weight matrices ~ N(0, 1/fan_in), with the two
    /// projections feeding each residual sum further scaled by `1/sqrt(2L)`;
    /// embeddings ~ N(0, 1/d_model), biases zero, layer-norm gains one.
    pub fn init(config: &EncoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = Blocks::empty(config.num_layers);
        let residual_scale = 1.0 / (2.0 * config.num_layers as f64).sqrt();
        let embed_std = 1.0 / (config.d_model as f64).sqrt();
        for id in config.block_ids() {
            let mut buf = Vec::with_capacity(config.param_count(id));
            for spec in config.layout(id) {
                let n = spec.numel();
                match (spec.shape.len(), spec.name) {
                    (_, "tok" | "pos") => buf.extend((0..n).map(|_| embed_std * rng.normal())),
                    (2, name) => {
                        let mut std = 1.0 / (spec.shape[0] as f64).sqrt();
                        if matches!(name, "wo" | "w2") {
                            std *= residual_scale;
                        }
                        buf.extend((0..n).map(|_| std * rng.normal()));
                    }
                    (_, "ln1_g" | "ln2_g") => buf.extend(std::iter::repeat_n(1.0, n)),
                    _ => buf.extend(std::iter::repeat_n(0.0, n)),
                }
            }
            *params.get_mut(id) = buf;
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        self.params.get(id)
    }

    /// All parameters in block order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|(_, v)| v.iter().copied()).collect()
    }

    pub fn unflatten(config: &EncoderConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.total_param_count() {
            return Err(Error::Shape {
                op: "unflatten",
                lhs: vec![config.total_param_count()],
                rhs: vec![flat.len()],
            });
        }
        let mut params = Blocks::empty(config.num_layers);
        let mut off = 0;
        for id in config.block_ids() {
            let n = config.param_count(id);
            *params.get_mut(id) = flat[off..off + n].to_vec();
            off += n;
        }
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|(_, v)| v.iter().all(|x| x.is_finite()))
    }
}

/// Per-block trainability. `layers[l - 1]` is layer `l`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub layers: Vec<bool>,
    pub embedding: bool,
    pub classifier: bool,
}

impl FreezeMask {
    pub fn all_trainable(num_layers: usize) -> Self {
        Self {
            layers: vec![true; num_layers],
            embedding: true,
            classifier: true,
        }
    }

    pub fn classifier_only(num_layers: usize) -> Self {
        Self {
            layers: vec![false; num_layers],
            embedding: false,
            classifier: true,
        }
    }

    /// Trains exactly the listed 1-based layer ids plus the given side blocks.
    pub fn layers(num_layers: usize, selected: &[usize], embedding: bool, classifier: bool) -> Self {
        let mut layers = vec![false; num_layers];
        for &l in selected {
            layers[l - 1] = true;
        }
        Self {
            layers,
            embedding,
            classifier,
        }
    }

    pub fn is_trainable(&self, id: BlockId) -> bool {
        match id {
            BlockId::Embedding => self.embedding,
            BlockId::Layer(l) => self.layers[l - 1],
            BlockId::Classifier => self.classifier,
        }
    }

    pub fn any_trainable(&self) -> bool {
        self.embedding || self.classifier || self.layers.iter().any(|&t| t)
    }

    pub fn trainable_layers(&self) -> Vec<usize> {
        (1..=self.layers.len()).filter(|&l| self.layers[l - 1]).collect()
    }
}

/// What the classifier head predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// One BIO label per token (extraction-style).
    #[default]
    TokenTagging,
    /// One label per sequence, read from the [CLS] position.
    SequenceClassification,
}
