use super::kernels::{self, add_assign};
use super::{matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Contiguous row range `[start, start + len)` holding one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        /// Per segment: `heads * len * len` weights in (h, i, j) order.
        probs: Vec<Vec<f64>>,
    },
    Sum(Var),
    L2Norm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape of tensor operations.
///
/// Nodes are recorded in evaluation order; [`Graph::backward`] replays them
/// in reverse. Gradients of leaves accumulate across backward calls until
/// [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Attention weights recorded by an [`Graph::attention`] node, one
    /// `heads * len * len` buffer per segment.
    pub fn attention_weights(&self, v: Var) -> Option<&[Vec<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.value(a), self.value(b))?;
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.numel() != vx.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(vb.numel().max(1)) {
            add_assign(row, vb.data());
        }
        let t = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, rg, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Scale(x, c))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| v / (1.0 + (-2.0 * GELU_C * (v + 0.044715 * v * v * v)).exp()))
            .collect();
        let t = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = super::softmax_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::SoftmaxRows(x)))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vx.shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gathers rows of a 2-D `table`; used for embeddings and row selection.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::Shape {
                op: "embedding_lookup",
                lhs: vt.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = (vt.shape()[0], vt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!("row id {id} out of range 0..{rows}")));
            }
            out.extend_from_slice(&vt.data()[id * cols..(id + 1) * cols]);
        }
        let t = Tensor::new(vec![ids.len(), cols], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            t,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Weighted sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let vl = self.value(logits);
        let (rows, cols) = (vl.rows(), vl.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy_with_logits",
                lhs: vl.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vl.data().to_vec();
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= cols {
                return Err(Error::Input(format!("target {t} out of range 0..{cols}")));
            }
            let row = &vl.data()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[t]);
            kernels::softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Scaled dot-product multi-head self-attention, applied independently
    /// within each segment. `q`, `k`, `v` are `(rows, heads * head_dim)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: vq.shape().to_vec(),
                rhs: vec![heads],
            });
        }
        let rows = vq.rows();
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > rows) || covered != rows {
            return Err(Error::Input("attention segments must tile the rows".into()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let n = seg.len;
            let mut p = vec![0.0; heads * n * n];
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qi = &qd[(seg.start + i) * d + off..][..dh];
                    let prow = &mut p[(h * n + i) * n..][..n];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(seg.start + j) * d + off..][..dh];
                        *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    kernels::softmax_in_place(prow);
                    let orow = &mut out[(seg.start + i) * d + off..][..dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(seg.start + j) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += pj * vv;
                        }
                    }
                }
            }
            probs.push(p);
        }
        let t = Tensor::new(vec![rows, d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = super::l2_norm(self.value(x).data());
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(n), rg, Op::L2Norm(x))
    }

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => add_assign(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => add_assign(existing, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, vb.data(), &mut da, m, n, k);
                    acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(va.data(), g, &mut db, m, k, n);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                acc(*x, g.to_vec());
                if self.requires_grad(*bias) {
                    let cols = self.value(*bias).numel();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        add_assign(&mut db, row);
                    }
                    acc(*bias, db);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(vx)
                    .map(|(&g, &v)| {
                        // 0.5 (1 + tanh u) = s with s = sigmoid(2u)
                        let s = 1.0 / (1.0 + (-2.0 * GELU_C * (v + 0.044715 * v * v * v)).exp());
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        g * (s + 2.0 * v * s * (1.0 - s) * du)
                    })
                    .collect();
                acc(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * cols..][..cols], &g[r * cols..][..cols]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = node.value.cols();
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; cols];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            dg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(*gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; cols];
                    for gr in g.chunks(cols) {
                        add_assign(&mut db, gr);
                    }
                    acc(*beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nc = cols as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..][..cols];
                        let hr = &xhat[r * cols..][..cols];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gam[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= nc;
                        m2 /= nc;
                        for c in 0..cols {
                            dx[r * cols + c] = is * (gr[c] * gam[c] - m1 - hr[c] * m2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.cols();
                let mut dt = vec![0.0; vt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut dt[id * cols..][..cols], &g[r * cols..][..cols]);
                }
                acc(*table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                let mut dl = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut dl[r * cols..][..cols];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w * g[0]);
                }
                acc(*logits, dl);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let d = self.value(*q).cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                for (seg, p) in segments.iter().zip(probs) {
                    let n = seg.len;
                    let mut ds = vec![0.0; n];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..n {
                            let prow = &p[(h * n + i) * n..][..n];
                            let go = &g[(seg.start + i) * d + off..][..dh];
                            // dP_ij = dO_i · V_j ; dV_j += P_ij dO_i
                            let mut dot = 0.0;
                            for j in 0..n {
                                let vj = &vd[(seg.start + j) * d + off..][..dh];
                                let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                ds[j] = dp;
                                dot += prow[j] * dp;
                                let dvj = &mut dv[(seg.start + j) * d + off..][..dh];
                                for (o, &gv) in dvj.iter_mut().zip(go) {
                                    *o += prow[j] * gv;
                                }
                            }
                            for j in 0..n {
                                ds[j] = prow[j] * (ds[j] - dot) * scale;
                            }
                            let qi = &qd[(seg.start + i) * d + off..][..dh];
                            for j in 0..n {
                                let s = ds[j];
                                let kj = &kd[(seg.start + j) * d + off..][..dh];
                                let dqi = &mut dq[(seg.start + i) * d + off..][..dh];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o += s * kv;
                                }
                                let dkj = &mut dk[(seg.start + j) * d + off..][..dh];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o += s * qv;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::L2Norm(x) => {
                let y = node.value.data()[0];
                let vx = self.value(*x).data();
                let dx = if y == 0.0 {
                    vec![0.0; vx.len()]
                } else {
                    vx.iter().map(|v| g[0] * v / y).collect()
                };
                acc(*x, dx);
            }
        }
    }
}
