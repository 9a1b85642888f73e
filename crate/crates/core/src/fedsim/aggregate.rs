use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LayerDelta;
use crate::encoder::BlockId;
use crate::error::{Error, Result};

/// How blocks sent by only some clients are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Weighted mean over the clients that sent the block.
    #[default]
    Senders,
    /// Only blocks sent by every client are applied.
    Intersection,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregated {
    /// Averaged delta per block that will be applied.
    pub blocks: BTreeMap<BlockId, Vec<f64>>,
    /// Clients whose delta went into each applied block.
    pub senders: BTreeMap<BlockId, Vec<usize>>,
    /// Blocks some client sent that were not applied.
    pub dropped: Vec<BlockId>,
}

/// Per-block weighted mean of client deltas. `deltas[c]` and `weights[c]`
/// belong to client `c`; weights are renormalized over each block's senders
/// and summed in client order.
pub fn aggregate(deltas: &[Vec<LayerDelta>], weights: &[f64], mode: AggregationMode) -> Result<Aggregated> {
    if deltas.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} client updates but {} weights",
            deltas.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::Input(format!("client weight {w} is not positive")));
    }
    let mut by_block: BTreeMap<BlockId, Vec<(usize, &[f64])>> = BTreeMap::new();
    for (c, list) in deltas.iter().enumerate() {
        for d in list {
            let entry = by_block.entry(d.block).or_default();
            if entry.last().is_some_and(|(prev, _)| *prev == c) {
                return Err(Error::Input(format!("client {c} sent block {} twice", d.block)));
            }
            entry.push((c, &d.values));
        }
    }

    let mut out = Aggregated::default();
    for (block, sent) in by_block {
        if mode == AggregationMode::Intersection && sent.len() != deltas.len() {
            out.dropped.push(block);
            continue;
        }
        let n = sent[0].1.len();
        if let Some((c, v)) = sent.iter().find(|(_, v)| v.len() != n) {
            return Err(Error::Input(format!(
                "client {c} sent {} values for block {block}, expected {n}",
                v.len()
            )));
        }
        let total: f64 = sent.iter().map(|(c, _)| weights[*c]).sum();
        let mut mean = vec![0.0; n];
        for (c, values) in &sent {
            let w = weights[*c] / total;
            for (m, v) in mean.iter_mut().zip(values.iter()) {
                *m += w * v;
            }
        }
        out.senders.insert(block, sent.iter().map(|(c, _)| *c).collect());
        out.blocks.insert(block, mean);
    }
    Ok(out)
}
