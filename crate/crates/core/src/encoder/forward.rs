use super::{BlockId, EncoderConfig, FreezeMask, ModelState, TaskMode};
use crate::error::{Error, Result};
use crate::synthdata::LabeledSequence;
use crate::tensor::{Graph, Segment, Tensor, Var};

/// Attention weights captured from one forward pass over one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub tokens: Vec<u32>,
    pub heads: usize,
    /// `layers[l - 1]` holds layer `l`'s weights in (h, i, j) order.
    pub layers: Vec<Vec<f64>>,
}

impl AttentionRecord {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// α from query `i` to key `j` in head `h` of 1-based layer `l`.
    pub fn alpha(&self, l: usize, h: usize, i: usize, j: usize) -> f64 {
        let n = self.seq_len();
        self.layers[l - 1][(h * n + i) * n + j]
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l - 1]
    }
}

struct Built {
    graph: Graph,
    logits: Var,
    attention: Vec<Var>,
    segments: Vec<Segment>,
    leaves: Vec<(BlockId, Vec<Var>)>,
}

fn check_tokens(config: &EncoderConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            tokens.len(),
            config.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Input(format!(
            "token {t} is outside the vocabulary (size {})",
            config.vocab_size
        )));
    }
    Ok(())
}

fn block_leaves(
    g: &mut Graph,
    model: &ModelState,
    id: BlockId,
    trainable: bool,
) -> Result<Vec<Var>> {
    let data = model.block(id);
    let mut off = 0;
    let mut vars = Vec::new();
    for spec in model.config.layout(id) {
        let n = spec.numel();
        let t = Tensor::new(spec.shape.clone(), data[off..off + n].to_vec())?;
        vars.push(g.leaf(t, trainable));
        off += n;
    }
    Ok(vars)
}

fn build(model: &ModelState, seqs: &[&[u32]], mask: Option<&FreezeMask>) -> Result<Built> {
    let cfg = &model.config;
    let trainable = |id| mask.is_some_and(|m: &FreezeMask| m.is_trainable(id));
    let mut g = Graph::new();
    let mut segments = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for tokens in seqs {
        check_tokens(cfg, tokens)?;
        segments.push(Segment {
            start: ids.len(),
            len: tokens.len(),
        });
        ids.extend(tokens.iter().map(|&t| t as usize));
        positions.extend(0..tokens.len());
    }

    let mut leaves = Vec::new();
    let emb = block_leaves(&mut g, model, BlockId::Embedding, trainable(BlockId::Embedding))?;
    let tok = g.embedding_lookup(emb[0], &ids)?;
    let pos = g.embedding_lookup(emb[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    leaves.push((BlockId::Embedding, emb));

    let mut attention = Vec::with_capacity(cfg.num_layers);
    for l in 1..=cfg.num_layers {
        let id = BlockId::Layer(l);
        let p = block_leaves(&mut g, model, id, trainable(id))?;
        let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b] = p[..]
        else {
            unreachable!("layer layout has 16 tensors")
        };
        let q = g.matmul(x, wq)?;
        let q = g.add_bias(q, bq)?;
        let k = g.matmul(x, wk)?;
        let k = g.add_bias(k, bk)?;
        let v = g.matmul(x, wv)?;
        let v = g.add_bias(v, bv)?;
        let a = g.attention(q, k, v, cfg.num_heads, &segments)?;
        attention.push(a);
        let o = g.matmul(a, wo)?;
        let o = g.add_bias(o, bo)?;
        let r = g.add(x, o)?;
        x = g.layer_norm(r, ln1_g, ln1_b)?;
        let h = g.matmul(x, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.gelu(h);
        let f = g.matmul(h, w2)?;
        let f = g.add_bias(f, b2)?;
        let r = g.add(x, f)?;
        x = g.layer_norm(r, ln2_g, ln2_b)?;
        leaves.push((id, p));
    }

    let head = block_leaves(&mut g, model, BlockId::Classifier, trainable(BlockId::Classifier))?;
    let logits = g.matmul(x, head[0])?;
    let logits = g.add_bias(logits, head[1])?;
    leaves.push((BlockId::Classifier, head));

    Ok(Built {
        graph: g,
        logits,
        attention,
        segments,
        leaves,
    })
}

fn records(built: &Built, seqs: &[&[u32]], heads: usize) -> Vec<AttentionRecord> {
    let mut out: Vec<AttentionRecord> = seqs
        .iter()
        .map(|t| AttentionRecord {
            tokens: t.to_vec(),
            heads,
            layers: Vec::with_capacity(built.attention.len()),
        })
        .collect();
    for &a in &built.attention {
        let w = built.graph.attention_weights(a).expect("attention node");
        for (rec, seg_w) in out.iter_mut().zip(w) {
            rec.layers.push(seg_w.clone());
        }
    }
    out
}

/// Forward pass over one sequence. Logits have shape `(N, num_labels)`.
pub fn forward(
    model: &ModelState,
    tokens: &[u32],
    capture: bool,
) -> Result<(Tensor, Option<AttentionRecord>)> {
    let (logits, mut recs) = forward_batch(model, &[tokens], capture)?;
    Ok((logits, recs.pop()))
}

/// Forward pass over several sequences whose rows are concatenated in the
/// returned logits. Records are empty unless `capture` is set.
pub fn forward_batch(
    model: &ModelState,
    seqs: &[&[u32]],
    capture: bool,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let built = build(model, seqs, None)?;
    let recs = if capture {
        records(&built, seqs, model.config.num_heads)
    } else {
        Vec::new()
    };
    Ok((built.graph.value(built.logits).clone(), recs))
}

/// Mean loss over the batch and its gradient for every trainable block.
/// Frozen blocks come back as empty vectors.
///
/// Token tagging averages cross-entropy over each sequence's tokens and then
/// over sequences; sequence classification reads the [CLS] row.
pub fn loss_and_grads(
    model: &ModelState,
    batch: &[&LabeledSequence],
    mask: &FreezeMask,
    task: TaskMode,
) -> Result<(f64, super::Blocks)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if mask.layers.len() != model.config.num_layers {
        return Err(Error::Contract(format!(
            "freeze mask covers {} layers, model has {}",
            mask.layers.len(),
            model.config.num_layers
        )));
    }
    let nl = model.config.num_labels;
    if let Some(&t) = batch
        .iter()
        .flat_map(|s| s.labels.iter())
        .find(|&&l| l as usize >= nl)
    {
        return Err(Error::Input(format!("label {t} outside 0..{nl}")));
    }
    let seqs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let mut built = build(model, &seqs, Some(mask))?;
    let b = batch.len() as f64;
    let g = &mut built.graph;

    let loss = match task {
        TaskMode::TokenTagging => {
            let mut targets = Vec::new();
            let mut weights = Vec::new();
            for s in batch {
                if s.labels.len() != s.tokens.len() {
                    return Err(Error::Input("labels and tokens differ in length".into()));
                }
                let w = 1.0 / (s.tokens.len() as f64 * b);
                targets.extend(s.labels.iter().map(|&l| l as usize));
                weights.extend(std::iter::repeat_n(w, s.tokens.len()));
            }
            g.cross_entropy_with_logits(built.logits, &targets, &weights)?
        }
        TaskMode::SequenceClassification => {
            let starts: Vec<usize> = built.segments.iter().map(|s| s.start).collect();
            let cls = g.embedding_lookup(built.logits, &starts)?;
            let targets: Vec<usize> = batch.iter().map(|s| s.sequence_label() as usize).collect();
            g.cross_entropy_with_logits(cls, &targets, &vec![1.0 / b; batch.len()])?
        }
    };

    let loss_value = g.value(loss).item()?;
    if g.requires_grad(loss) {
        g.backward(loss)?;
    }
    let mut grads = super::Blocks::empty(model.config.num_layers);
    for (id, vars) in &built.leaves {
        if !mask.is_trainable(*id) {
            continue;
        }
        let buf = grads.get_mut(*id);
        buf.reserve(model.config.param_count(*id));
        for &v in vars {
            match g.grad(v) {
                Some(gr) => buf.extend_from_slice(gr),
                None => buf.extend(std::iter::repeat_n(0.0, g.value(v).numel())),
            }
        }
    }
    Ok((loss_value, grads))
}
