use serde::{Deserialize, Serialize};

use crate::encoder::BlockId;

/// Width of one transmitted value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireFormat {
    #[default]
    F64,
    F32,
}

impl WireFormat {
    pub fn value_bytes(self) -> usize {
        match self {
            WireFormat::F64 => 8,
            WireFormat::F32 => 4,
        }
    }
}

/// How a delta's nonzero positions are conveyed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    /// Every value, zeros included.
    Dense,
    /// Nonzero values plus a one-bit-per-entry presence map.
    Bitmap,
    /// Nonzero values plus a 32-bit index each.
    Indices,
}

/// One parameter block's update as sent by a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub block: BlockId,
    pub values: Vec<f64>,
    pub encoding: Encoding,
    pub wire: WireFormat,
}

impl LayerDelta {
    pub fn dense(block: BlockId, values: Vec<f64>, wire: WireFormat) -> Self {
        Self {
            block,
            values,
            encoding: Encoding::Dense,
            wire,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn nonzeros(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Bytes spent on positions rather than values.
    pub fn index_overhead(&self) -> usize {
        match self.encoding {
            Encoding::Dense => 0,
            Encoding::Bitmap => self.values.len().div_ceil(8),
            Encoding::Indices => 4 * self.nonzeros(),
        }
    }

    /// Values on the wire: all of them when dense, the nonzeros otherwise.
    pub fn transmitted_values(&self) -> usize {
        match self.encoding {
            Encoding::Dense => self.values.len(),
            _ => self.nonzeros(),
        }
    }

    pub fn byte_size(&self) -> usize {
        self.transmitted_values() * self.wire.value_bytes() + self.index_overhead()
    }

    /// The smallest of the three encodings for the current values.
    pub fn cheapest_encoding(&self) -> Encoding {
        let (vb, n, nnz) = (self.wire.value_bytes(), self.values.len(), self.nonzeros());
        let dense = n * vb;
        let bitmap = nnz * vb + n.div_ceil(8);
        let indices = nnz * (vb + 4);
        if dense <= bitmap && dense <= indices {
            Encoding::Dense
        } else if bitmap <= indices {
            Encoding::Bitmap
        } else {
            Encoding::Indices
        }
    }
}

/// Byte counts for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommRound {
    pub round: usize,
    /// Uplink bytes per client, indexed by client id.
    pub bytes_up: Vec<usize>,
    pub bytes_down: usize,
    /// Uplink bytes spent on transformer-layer blocks, all clients.
    pub layer_bytes_up: usize,
    /// Transformer-layer values sent, all clients.
    pub layer_values_up: usize,
    /// Uplink a full-model FedAvg round would send: every trainable block
    /// from every client.
    pub baseline_full_bytes: usize,
    /// Uplink of all transformer layers from every client.
    pub baseline_layer_bytes: usize,
}

impl CommRound {
    pub fn total_up(&self) -> usize {
        self.bytes_up.iter().sum()
    }

    /// `1 - uplink / full baseline`.
    pub fn reduction(&self) -> f64 {
        ratio_reduction(self.total_up(), self.baseline_full_bytes)
    }

    /// `1 - layer uplink / all-layer baseline`.
    pub fn layer_reduction(&self) -> f64 {
        ratio_reduction(self.layer_bytes_up, self.baseline_layer_bytes)
    }
}

fn ratio_reduction(sent: usize, baseline: usize) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - sent as f64 / baseline as f64
    }
}

/// Append-only per-round communication record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub rounds: Vec<CommRound>,
}

impl CommLedger {
    pub fn push(&mut self, round: CommRound) {
        self.rounds.push(round);
    }

    pub fn total_up(&self) -> usize {
        self.rounds.iter().map(CommRound::total_up).sum()
    }

    pub fn total_down(&self) -> usize {
        self.rounds.iter().map(|r| r.bytes_down).sum()
    }

    pub fn total_baseline(&self) -> usize {
        self.rounds.iter().map(|r| r.baseline_full_bytes).sum()
    }

    /// Cumulative uplink reduction over all rounds.
    pub fn reduction(&self) -> f64 {
        ratio_reduction(self.total_up(), self.total_baseline())
    }

    pub fn layer_reduction(&self) -> f64 {
        ratio_reduction(
            self.rounds.iter().map(|r| r.layer_bytes_up).sum(),
            self.rounds.iter().map(|r| r.baseline_layer_bytes).sum(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_and_sparse_sizes() {
        let mut d = LayerDelta::dense(BlockId::Layer(1), vec![1.0, 0.0, 2.0, 0.0], WireFormat::F64);
        assert_eq!(d.byte_size(), 32);
        d.encoding = Encoding::Bitmap;
        assert_eq!(d.byte_size(), 2 * 8 + 1);
        d.encoding = Encoding::Indices;
        assert_eq!(d.byte_size(), 2 * 8 + 2 * 4);
        d.wire = WireFormat::F32;
        assert_eq!(d.byte_size(), 2 * 4 + 2 * 4);
    }

    #[test]
    fn cheapest_encoding_never_exceeds_dense() {
        let nearly_full = LayerDelta::dense(BlockId::Layer(1), vec![1.0; 64], WireFormat::F64);
        assert_eq!(nearly_full.cheapest_encoding(), Encoding::Dense);
        let mut sparse = vec![0.0; 64];
        sparse[3] = 1.0;
        let d = LayerDelta::dense(BlockId::Layer(1), sparse, WireFormat::F64);
        assert_eq!(d.cheapest_encoding(), Encoding::Indices);
        let mut mostly = vec![1.0; 64];
        mostly[..10].iter_mut().for_each(|v| *v = 0.0);
        let d = LayerDelta::dense(BlockId::Layer(1), mostly, WireFormat::F64);
        assert_eq!(d.cheapest_encoding(), Encoding::Bitmap);
    }

    #[test]
    fn reductions() {
        let r = CommRound {
            round: 0,
            bytes_up: vec![10, 20],
            bytes_down: 0,
            layer_bytes_up: 10,
            layer_values_up: 0,
            baseline_full_bytes: 120,
            baseline_layer_bytes: 30,
        };
        assert!((r.reduction() - 0.75).abs() < 1e-15);
        assert!((r.layer_reduction() - 2.0 / 3.0).abs() < 1e-15);
    }
}
