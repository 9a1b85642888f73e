//! Cumulative attention scores per layer, top-K layer selection, and
//! magnitude pruning of layer updates.
//!
//! For layer `l` the raw score is
//!
//! ```text
//! A_l = Σ_h Σ_i Σ_j α[l][h][i][j] · 1[t_j ∈ T]
//! ```
//!
//! summed over every profiled sequence, where `T` is the task token set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};
use crate::fedsim::{Encoding, LayerDelta};

/// Which tokens count as task-relevant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "values", rename_all = "snake_case")]
pub enum TaskTokenSpec {
    /// Tokens whose id is in the set.
    TokenIds(BTreeSet<u32>),
    /// Tokens at the listed positions.
    Positions(BTreeSet<usize>),
}

impl Default for TaskTokenSpec {
    /// The [CLS] position.
    fn default() -> Self {
        TaskTokenSpec::Positions(BTreeSet::from([0]))
    }
}

impl TaskTokenSpec {
    pub fn validate(&self) -> Result<()> {
        let empty = match self {
            TaskTokenSpec::TokenIds(s) => s.is_empty(),
            TaskTokenSpec::Positions(s) => s.is_empty(),
        };
        if empty {
            return Err(Error::Input("task token set is empty".into()));
        }
        Ok(())
    }

    /// Positions of `tokens` that belong to the task set.
    pub fn matching_positions(&self, tokens: &[u32]) -> Vec<usize> {
        match self {
            TaskTokenSpec::TokenIds(ids) => (0..tokens.len())
                .filter(|&j| ids.contains(&tokens[j]))
                .collect(),
            TaskTokenSpec::Positions(pos) => {
                pos.iter().copied().filter(|&j| j < tokens.len()).collect()
            }
        }
    }
}

/// Whether the indicator applies to the attended-to (key) token, as in the
/// score formula, or to the attending (query) token.
///
/// Attention rows are normalized, so the query-side variant scores every
/// layer `H · |T|` per sequence and cannot separate layers; it exists for
/// comparison only.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSide {
    #[default]
    Key,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStatus {
    Ok,
    /// No profiled token matched the task set; all scores are zero.
    NoTaskTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    /// `raw[l - 1]` is A_l.
    pub raw: Vec<f64>,
    /// A_l divided by the number of contributing (h, i, j) triples.
    pub normalized: Vec<f64>,
    pub num_examples: usize,
    pub status: ScoreStatus,
}

impl LayerScores {
    pub fn num_layers(&self) -> usize {
        self.raw.len()
    }
}

pub fn layer_scores(records: &[AttentionRecord], spec: &TaskTokenSpec) -> Result<LayerScores> {
    layer_scores_with(records, spec, AttentionSide::Key)
}

pub fn layer_scores_with(
    records: &[AttentionRecord],
    spec: &TaskTokenSpec,
    side: AttentionSide,
) -> Result<LayerScores> {
    spec.validate()?;
    let first = records
        .first()
        .ok_or_else(|| Error::Input("no attention records to score".into()))?;
    let (num_layers, heads) = (first.num_layers(), first.heads);
    if records
        .iter()
        .any(|r| r.num_layers() != num_layers || r.heads != heads)
    {
        return Err(Error::Input(
            "attention records come from different model configs".into(),
        ));
    }

    let mut raw = vec![0.0; num_layers];
    let mut triples = 0usize;
    for rec in records {
        let n = rec.seq_len();
        let matched = spec.matching_positions(&rec.tokens);
        if matched.is_empty() {
            continue;
        }
        triples += heads * n * matched.len();
        for (l, score) in raw.iter_mut().enumerate() {
            let alpha = &rec.layers[l];
            match side {
                AttentionSide::Key => {
                    // column mass over all (h, i), then pick task columns
                    let mut column = vec![0.0; n];
                    for row in alpha.chunks_exact(n) {
                        for (c, a) in column.iter_mut().zip(row) {
                            *c += a;
                        }
                    }
                    *score += matched.iter().map(|&j| column[j]).sum::<f64>();
                }
                AttentionSide::Query => {
                    for h in 0..heads {
                        for &i in &matched {
                            *score += alpha[(h * n + i) * n..][..n].iter().sum::<f64>();
                        }
                    }
                }
            }
        }
    }

    let status = if triples == 0 {
        log::warn!("task token set matched nothing in {} profiled sequences", records.len());
        ScoreStatus::NoTaskTokens
    } else {
        ScoreStatus::Ok
    };
    let normalized = raw
        .iter()
        .map(|&a| if triples == 0 { 0.0 } else { a / triples as f64 })
        .collect();
    Ok(LayerScores {
        raw,
        normalized,
        num_examples: records.len(),
        status,
    })
}

/// Selected 1-based layer ids in increasing order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub layers: Vec<usize>,
    /// The last selected and first rejected layer had equal scores.
    pub tie_at_boundary: bool,
}

impl SelectionMask {
    pub fn all(num_layers: usize) -> Self {
        Self {
            layers: (1..=num_layers).collect(),
            tie_at_boundary: false,
        }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }
}

/// The `k` layers with the highest raw score; ties go to the lower id.
pub fn select_top_k(scores: &LayerScores, k: usize) -> Result<SelectionMask> {
    if k < 1 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    let n = scores.num_layers();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores.raw[b].total_cmp(&scores.raw[a]).then(a.cmp(&b)));
    let take = k.min(n);
    let tie_at_boundary = take < n && take > 0 && scores.raw[order[take - 1]] == scores.raw[order[take]];
    let mut layers: Vec<usize> = order[..take].iter().map(|i| i + 1).collect();
    layers.sort_unstable();
    Ok(SelectionMask {
        layers,
        tie_at_boundary,
    })
}

/// Number of entries kept when pruning `fraction` of `n`: `⌊(1 - fraction) n⌋`.
pub fn kept_after_pruning(n: usize, fraction: f64) -> usize {
    // guard against 0.85 * 20 landing on 16.999...
    let kept = ((1.0 - fraction) * n as f64 + 1e-9).floor() as usize;
    kept.min(n)
}

/// Zeroes the smallest-magnitude entries of a layer update, leaving
/// `⌊(1 - fraction) n⌋` entries untouched. Ties go to the lower index.
/// The delta switches to whichever sparse encoding is cheapest.
pub fn prune_update(delta: &LayerDelta, fraction: f64) -> Result<LayerDelta> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Input(format!("prune fraction {fraction} outside [0, 1)")));
    }
    if fraction == 0.0 {
        return Ok(delta.clone());
    }
    let n = delta.values.len();
    let drop = n - kept_after_pruning(n, fraction);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        delta.values[a]
            .abs()
            .total_cmp(&delta.values[b].abs())
            .then(a.cmp(&b))
    });
    let mut values = delta.values.clone();
    for &i in &order[..drop] {
        values[i] = 0.0;
    }
    let mut pruned = LayerDelta {
        values,
        encoding: Encoding::Dense,
        ..delta.clone()
    };
    pruned.encoding = pruned.cheapest_encoding();
    Ok(pruned)
}

/// Prunes several layer updates as one vector: the
/// `n - ⌊(1 - fraction) n⌋` smallest magnitudes across all of them are
/// zeroed, where `n` is their total length. Ties go to the earlier delta,
/// then the lower index.
pub fn prune_updates(deltas: &[LayerDelta], fraction: f64) -> Result<Vec<LayerDelta>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Input(format!("prune fraction {fraction} outside [0, 1)")));
    }
    if fraction == 0.0 {
        return Ok(deltas.to_vec());
    }
    let mut flat: Vec<(usize, usize)> = deltas
        .iter()
        .enumerate()
        .flat_map(|(d, delta)| (0..delta.values.len()).map(move |i| (d, i)))
        .collect();
    let n = flat.len();
    let drop = n - kept_after_pruning(n, fraction);
    flat.sort_by(|&(da, ia), &(db, ib)| {
        deltas[da].values[ia]
            .abs()
            .total_cmp(&deltas[db].values[ib].abs())
            .then((da, ia).cmp(&(db, ib)))
    });
    let mut out = deltas.to_vec();
    for &(d, i) in &flat[..drop] {
        out[d].values[i] = 0.0;
    }
    for delta in &mut out {
        delta.encoding = delta.cheapest_encoding();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BlockId;
    use crate::fedsim::WireFormat;

    fn record(n: usize, heads: usize, layers: Vec<Vec<f64>>) -> AttentionRecord {
        AttentionRecord {
            tokens: (0..n as u32).map(|t| t + 1).collect(),
            heads,
            layers,
        }
    }

    fn scores(raw: Vec<f64>) -> LayerScores {
        LayerScores {
            normalized: raw.clone(),
            raw,
            num_examples: 1,
            status: ScoreStatus::Ok,
        }
    }

    #[test]
    fn uniform_attention_into_position_zero() {
        let rec = record(2, 1, vec![vec![0.5; 4]]);
        let s = layer_scores(&[rec], &TaskTokenSpec::default()).unwrap();
        assert_eq!(s.raw, vec![1.0]);
        assert_eq!(s.normalized, vec![0.5]);
    }

    #[test]
    fn all_positions_give_h_times_n() {
        let n = 3;
        let h = 2;
        let row = [0.2, 0.3, 0.5];
        let layer: Vec<f64> = row.iter().copied().cycle().take(h * n * n).collect();
        let rec = record(n, h, vec![layer.clone(), layer]);
        let spec = TaskTokenSpec::Positions((0..n).collect());
        let s = layer_scores(&[rec], &spec).unwrap();
        for a in s.raw {
            assert!((a - (h * n) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn unmatched_spec_reports_status() {
        let rec = record(2, 1, vec![vec![0.5; 4]]);
        let spec = TaskTokenSpec::TokenIds(BTreeSet::from([99]));
        let s = layer_scores(&[rec], &spec).unwrap();
        assert_eq!(s.status, ScoreStatus::NoTaskTokens);
        assert_eq!(s.raw, vec![0.0]);
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(layer_scores(&[], &TaskTokenSpec::default()).is_err());
        let rec = record(2, 1, vec![vec![0.5; 4]]);
        assert!(layer_scores(&[rec], &TaskTokenSpec::Positions(BTreeSet::new())).is_err());
    }

    #[test]
    fn query_side_is_constant() {
        let rec = record(2, 1, vec![vec![0.9, 0.1, 0.3, 0.7], vec![0.5; 4]]);
        let s = layer_scores_with(&[rec], &TaskTokenSpec::default(), AttentionSide::Query).unwrap();
        assert!((s.raw[0] - 1.0).abs() < 1e-12 && (s.raw[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_cases() {
        let s = scores(vec![0.3, 0.1, 0.5]);
        assert_eq!(select_top_k(&s, 1).unwrap().layers, vec![3]);
        assert_eq!(select_top_k(&s, 3).unwrap().layers, vec![1, 2, 3]);
        assert_eq!(select_top_k(&s, 7).unwrap().layers, vec![1, 2, 3]);
        assert!(select_top_k(&s, 0).is_err());
    }

    #[test]
    fn ties_go_to_lower_layer() {
        let s = scores(vec![0.2, 0.5, 0.5, 0.5]);
        let m = select_top_k(&s, 2).unwrap();
        assert_eq!(m.layers, vec![2, 3]);
        assert!(m.tie_at_boundary);
        assert!(!select_top_k(&s, 3).unwrap().tie_at_boundary);
    }

    fn delta(values: Vec<f64>) -> LayerDelta {
        LayerDelta::dense(BlockId::Layer(1), values, WireFormat::F64)
    }

    #[test]
    fn prune_examples() {
        let d = delta(vec![3.0, -1.0, 0.5, 2.0]);
        assert_eq!(prune_update(&d, 0.0).unwrap(), d);
        let p = prune_update(&d, 0.5).unwrap();
        assert_eq!(p.values, vec![3.0, 0.0, 0.0, 2.0]);
        assert!(prune_update(&d, 1.0).is_err());
        assert!(prune_update(&d, -0.1).is_err());
    }

    #[test]
    fn kept_count_is_exact_at_integer_boundaries() {
        assert_eq!(kept_after_pruning(20, 0.15), 17);
        assert_eq!(kept_after_pruning(10, 0.15), 8);
        assert_eq!(kept_after_pruning(7, 0.0), 7);
    }

    #[test]
    fn joint_pruning_counts_over_the_concatenation() {
        let a = LayerDelta::dense(BlockId::Layer(1), vec![1.0; 10], WireFormat::F64);
        let b = LayerDelta::dense(BlockId::Layer(2), vec![2.0; 10], WireFormat::F64);
        let out = prune_updates(&[a, b], 0.15).unwrap();
        let kept: usize = out.iter().map(LayerDelta::nonzeros).sum();
        assert_eq!(kept, 17);
        // the three dropped entries are the smallest: the first block's head
        assert_eq!(out[0].values[..3], [0.0; 3]);
        assert_eq!(out[1].nonzeros(), 10);
    }
}
