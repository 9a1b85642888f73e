//! Synthetic token-tagging corpus and Dirichlet label-skew partitioning.
//!
//! Token ids: `0` is padding (never emitted), `1` is [CLS], then one
//! sub-vocabulary per entity type, then background words. Entity spans draw
//! their B and I tokens from the same sub-vocabulary, so telling B from I
//! needs the previous position.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::encoder::CLS_TOKEN;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

const FIRST_ENTITY_TOKEN: u32 = 2;
const MAX_SPAN_LEN: usize = 3;
const MAX_PARTITION_ATTEMPTS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub tokens: Vec<u32>,
    pub labels: Vec<u32>,
}

impl LabeledSequence {
    /// Entity type of a BIO label, `None` for background.
    pub fn entity_type(label: u32) -> Option<usize> {
        (label > 0).then(|| ((label - 1) / 2) as usize)
    }

    /// Entity spans per type, counted at their B tags.
    pub fn span_counts(&self, num_entity_types: usize) -> Vec<usize> {
        let mut counts = vec![0; num_entity_types];
        for &l in &self.labels {
            if l > 0 && l % 2 == 1 {
                if let Some(c) = counts.get_mut(((l - 1) / 2) as usize) {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// `0` for a sequence without entities, else `1 + t` where `t` is the
    /// entity type with the most tagged tokens (lowest type wins ties).
    pub fn sequence_label(&self) -> u32 {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &l in &self.labels {
            if let Some(t) = Self::entity_type(l) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let best = counts
            .iter()
            .fold(None, |best: Option<(usize, usize)>, (&t, &c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((t, c)),
            });
        best.map_or(0, |(t, _)| t as u32 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_sequences: usize,
    /// Length range including the [CLS] token.
    pub min_len: usize,
    pub max_len: usize,
    pub num_entity_types: usize,
    /// Tokens per entity sub-vocabulary.
    pub entity_vocab: usize,
    /// Probability that an eligible body position opens an entity span.
    pub entity_density: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            num_sequences: 400,
            min_len: 8,
            max_len: 16,
            num_entity_types: 3,
            entity_vocab: 16,
            entity_density: 0.2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn num_labels(&self) -> usize {
        1 + 2 * self.num_entity_types
    }

    fn background_start(&self) -> u32 {
        FIRST_ENTITY_TOKEN + (self.num_entity_types * self.entity_vocab) as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config(
                "corpus.min_len",
                "need 2 <= min_len <= max_len ([CLS] plus at least one token)",
            ));
        }
        if !(0.0..=1.0).contains(&self.entity_density) {
            return Err(Error::config("corpus.entity_density", "must lie in [0, 1]"));
        }
        if self.entity_density > 0.0 && (self.num_entity_types == 0 || self.entity_vocab == 0) {
            return Err(Error::config(
                "corpus.entity_density",
                "entities requested but no entity types or entity vocabulary",
            ));
        }
        if self.background_start() as usize >= self.vocab_size {
            return Err(Error::config(
                "corpus.vocab_size",
                format!(
                    "{} leaves no background tokens after {} reserved ids",
                    self.vocab_size,
                    self.background_start()
                ),
            ));
        }
        if self.num_sequences == 0 {
            return Err(Error::config("corpus.num_sequences", "must be at least 1"));
        }
        Ok(())
    }
}

/// Generates `spec.num_sequences` labelled sequences from `spec.seed`.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<LabeledSequence>> {
    generate_stream(spec, "corpus")
}

/// Like [`generate`] but with a distinct stream label, so held-out sets
/// drawn from the same spec do not repeat the training sequences.
pub fn generate_stream(spec: &CorpusSpec, label: &str) -> Result<Vec<LabeledSequence>> {
    spec.validate()?;
    let mut rng = RngStream::new(spec.seed, label);
    let bg_start = spec.background_start();
    let bg_count = spec.vocab_size as u32 - bg_start;
    let mut out = Vec::with_capacity(spec.num_sequences);
    for _ in 0..spec.num_sequences {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut tokens = vec![CLS_TOKEN];
        let mut labels = vec![0];
        while tokens.len() < len {
            let prev_entity = labels.last().is_some_and(|&l| l != 0);
            if !prev_entity && rng.gen::<f64>() < spec.entity_density {
                let ty = rng.gen_range(0..spec.num_entity_types);
                let span = rng.gen_range(1..=MAX_SPAN_LEN).min(len - tokens.len());
                let base = FIRST_ENTITY_TOKEN + (ty * spec.entity_vocab) as u32;
                for k in 0..span {
                    tokens.push(base + rng.gen_range(0..spec.entity_vocab as u32));
                    labels.push(if k == 0 { 1 + 2 * ty as u32 } else { 2 + 2 * ty as u32 });
                }
            } else {
                tokens.push(bg_start + rng.gen_range(0..bg_count));
                labels.push(0);
            }
        }
        out.push(LabeledSequence { tokens, labels });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            num_clients: 10,
            dirichlet_alpha: 1.0,
            seed: 0,
        }
    }
}

/// Sequence indices per client.
pub type Shards = Vec<Vec<usize>>;

/// Dirichlet label-skew split: sequences are grouped by their dominant
/// entity type (see [`LabeledSequence::sequence_label`]); each group is cut
/// across clients by proportions drawn from `Dirichlet(alpha)`. Redraws
/// until no client is empty.
pub fn partition(corpus: &[LabeledSequence], spec: &PartitionSpec) -> Result<Shards> {
    let m = spec.num_clients;
    if m == 0 {
        return Err(Error::config("partition.num_clients", "must be at least 1"));
    }
    if m > corpus.len() {
        return Err(Error::config(
            "partition.num_clients",
            format!("{m} clients for {} sequences", corpus.len()),
        ));
    }
    if !(spec.dirichlet_alpha > 0.0 && spec.dirichlet_alpha.is_finite()) {
        return Err(Error::config("partition.dirichlet_alpha", "must be positive and finite"));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        groups.entry(s.sequence_label()).or_default().push(i);
    }
    let dirichlet = (m > 1)
        .then(|| Dirichlet::new_with_size(spec.dirichlet_alpha, m))
        .transpose()
        .map_err(|e| Error::config("partition.dirichlet_alpha", e.to_string()))?;

    for attempt in 0..MAX_PARTITION_ATTEMPTS {
        let mut rng = RngStream::new(spec.seed, format!("partition:{attempt}"));
        let mut shards: Shards = vec![Vec::new(); m];
        for members in groups.values() {
            let order = rng.permutation(members.len());
            let props = dirichlet.as_ref().map_or(vec![1.0], |d| d.sample(&mut rng));
            let n = members.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (c, p) in props.iter().enumerate() {
                cum += p;
                let end = if c + 1 == m { n } else { ((cum * n as f64) as usize).min(n) };
                shards[c].extend(order[start..end.max(start)].iter().map(|&k| members[k]));
                start = end.max(start);
            }
        }
        if shards.iter().all(|s| !s.is_empty()) {
            shards.iter_mut().for_each(|s| s.sort_unstable());
            return Ok(shards);
        }
    }
    Err(Error::Partition(format!(
        "some client stayed empty after {MAX_PARTITION_ATTEMPTS} draws (alpha = {}, {m} clients)",
        spec.dirichlet_alpha
    )))
}

/// Per-client share of entity spans by type; rows sum to 1 (or 0 for a
/// client without entities).
pub fn entity_histograms(
    corpus: &[LabeledSequence],
    shards: &Shards,
    num_entity_types: usize,
) -> Vec<Vec<f64>> {
    shards
        .iter()
        .map(|s| normalized_counts(s.iter().map(|&i| &corpus[i]), num_entity_types))
        .collect()
}

pub fn global_histogram(corpus: &[LabeledSequence], num_entity_types: usize) -> Vec<f64> {
    normalized_counts(corpus.iter(), num_entity_types)
}

fn normalized_counts<'a>(
    seqs: impl Iterator<Item = &'a LabeledSequence>,
    num_entity_types: usize,
) -> Vec<f64> {
    let mut counts = vec![0usize; num_entity_types];
    for s in seqs {
        for (c, k) in counts.iter_mut().zip(s.span_counts(num_entity_types)) {
            *c += k;
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// Largest ratio of a client's entity-type share to the global share.
pub fn skew_statistic(corpus: &[LabeledSequence], shards: &Shards, num_entity_types: usize) -> f64 {
    let global = global_histogram(corpus, num_entity_types);
    entity_histograms(corpus, shards, num_entity_types)
        .iter()
        .flat_map(|h| {
            h.iter()
                .zip(&global)
                .filter(|(_, &g)| g > 0.0)
                .map(|(c, g)| c / g)
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// JSONL: one `{"tokens": [...], "labels": [...]}` per line.
pub fn write_corpus(corpus: &[LabeledSequence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in corpus {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::format(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledSequence>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: LabeledSequence = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if s.tokens.len() != s.labels.len() {
            return Err(Error::format(path, format!("line {}: length mismatch", n + 1)));
        }
        out.push(s);
    }
    Ok(out)
}

/// JSON object mapping client id (as a string key) to sequence indices.
pub fn write_partition(shards: &Shards, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let map: BTreeMap<String, &Vec<usize>> =
        shards.iter().enumerate().map(|(c, s)| (c.to_string(), s)).collect();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &map).map_err(|e| Error::format(path, e))
}

pub fn read_partition(path: impl AsRef<Path>) -> Result<Shards> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, Vec<usize>> =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::format(path, e))?;
    let mut keyed: Vec<(usize, Vec<usize>)> = map
        .into_iter()
        .map(|(k, v)| {
            k.parse()
                .map(|c| (c, v))
                .map_err(|_| Error::format(path, format!("client id `{k}` is not an integer")))
        })
        .collect::<Result<_>>()?;
    keyed.sort_by_key(|(c, _)| *c);
    if keyed.iter().enumerate().any(|(i, (c, _))| i != *c) {
        return Err(Error::format(path, "client ids must be 0..n without gaps"));
    }
    Ok(keyed.into_iter().map(|(_, v)| v).collect())
}
