//! Tape-based reverse-mode differentiation over named parameters.
//!
//! A [`Tape`] records one forward computation (define-by-run); calling
//! [`Tape::backward`] once replays it in reverse and returns a
//! [`GradientVector`] holding the gradient of a scalar loss with respect to
//! every trainable parameter bound on the tape. Non-trainable parameters
//! receive no entry and no backward work: propagation is pruned below
//! nodes whose subtree contains no trainable leaf.
//!
//! The op set is exactly what the toy multimodal model and its losses
//! need; each op carries the forward caches its backward rule requires.
//! Within every op, accumulation order is fixed, so gradients are
//! bit-identical across runs and thread counts.

mod fd;
mod gradvec;

pub use fd::finite_difference_check;
pub use gradvec::GradientVector;

use std::collections::BTreeMap;
use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{self, matmul, matmul_a_bt, matmul_at_b, Tensor};

/// A named tensor with a fixed trainable flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Parameter { name: name.into(), value, trainable }
    }
}

/// Ordered collection of uniquely named parameters.
///
/// Iteration order is lexicographic by name, which defines the canonical
/// flatten order used by [`GradientVector`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<()> {
        if self.params.contains_key(&p.name) {
            return Err(Error::Contract(format!("duplicate parameter name {:?}", p.name)));
        }
        self.params.insert(p.name.clone(), p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Total element count over trainable parameters.
    pub fn trainable_len(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Geometry of one causal-attention call.
#[derive(Clone, Debug)]
pub struct AttentionMeta {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Per flat position `b·seq + j`: whether this position may be attended
    /// to as a key. A query can always attend to itself regardless.
    pub key_active: Vec<bool>,
}

enum Op {
    Leaf {
        name: Option<String>,
        trainable: bool,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `[r×d] + bias[d]`, bias added to every row.
    AddRowBroadcast {
        x: NodeId,
        bias: NodeId,
    },
    Add {
        x: NodeId,
        y: NodeId,
    },
    Mul {
        x: NodeId,
        y: NodeId,
    },
    Scale {
        x: NodeId,
        factor: f64,
    },
    /// Full sum to a scalar.
    Sum {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        meta: AttentionMeta,
        probs: Vec<f64>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    /// Row-interleaves several 2-D inputs into one output; `src[i]` names
    /// the (part, row) copied to output row `i`. Every source row is used
    /// exactly once.
    Interleave {
        parts: Vec<NodeId>,
        src: Vec<(u32, u32)>,
    },
    /// `Σ|x − target|`, optionally divided by the element count.
    L1DistConst {
        x: NodeId,
        target: Tensor,
        mean: bool,
    },
    /// Weighted mean of per-row `−ln softmax(logits)[gold]`.
    MaskedCrossEntropy {
        logits: NodeId,
        gold: Vec<usize>,
        weights: Vec<f64>,
        weight_sum: f64,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records one forward computation for a single backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    bound_names: HashSet<String>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound_names: HashSet::new(), spent: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Binds a constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf { name: None, trainable: false }, false)
    }

    /// Binds a named parameter. Each name may be bound at most once per
    /// tape; a second binding would split its gradient silently.
    pub fn param(&mut self, p: &Parameter) -> Result<NodeId> {
        if !self.bound_names.insert(p.name.clone()) {
            return Err(Error::Usage(format!(
                "parameter {:?} bound twice on one tape",
                p.name
            )));
        }
        Ok(self.push(
            p.value.clone(),
            Op::Leaf { name: Some(p.name.clone()), trainable: p.trainable },
            p.trainable,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b }, needs))
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let value = tensor::add(self.value(x), self.value(y))?;
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(value, Op::Add { x, y }, needs))
    }

    pub fn mul(&mut self, x: NodeId, y: NodeId) -> Result<NodeId> {
        let value = tensor::mul(self.value(x), self.value(y))?;
        let needs = self.needs(x) || self.needs(y);
        Ok(self.push(value, Op::Mul { x, y }, needs))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = tensor::scale(self.value(x), factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, needs)
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        let bt = self.value(bias);
        if bt.shape() != [d] {
            return Err(Error::Dim(format!(
                "add_row_broadcast: bias shape {:?} does not match row width {d}",
                bt.shape()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let bd = bt.data();
        for row in out.chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![r, d], out)?, Op::AddRowBroadcast { x, bias }, needs))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).data().to_vec();
        let chunk = out.len().max(1);
        par::for_each_row_mut(&mut out, chunk.min(4096), |_, chunk| {
            for v in chunk {
                *v = gelu_fwd(*v);
            }
        });
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out).expect("same length"), Op::Gelu { x }, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Dim(format!(
                "layer_norm: gain {:?} / bias {:?} do not match row width {d}",
                self.value(gain).shape(),
                self.value(bias).shape()
            )));
        }
        let mut normalized = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        let xd = self.value(x).data();
        par::for_each_row_mut(&mut normalized, d, |i, row| {
            let xrow = &xd[i * d..(i + 1) * d];
            let mean = xrow.iter().sum::<f64>() / d as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, &v) in row.iter_mut().zip(xrow) {
                *o = (v - mean) * is;
            }
        });
        // second cheap pass for inv_std (kept outside the parallel region so
        // the normalized buffer owns the parallel write)
        for i in 0..r {
            let xrow = &xd[i * d..(i + 1) * d];
            let mean = xrow.iter().sum::<f64>() / d as f64;
            let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            inv_std[i] = 1.0 / (var + eps).sqrt();
        }
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; r * d];
        for (orow, nrow) in out.chunks_mut(d).zip(normalized.chunks(d)) {
            for j in 0..d {
                orow[j] = nrow[j] * gd[j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let normalized = Tensor::new(vec![r, d], normalized)?;
        Ok(self.push(
            Tensor::new(vec![r, d], out)?,
            Op::LayerNorm { x, gain, bias, normalized, inv_std },
            needs,
        ))
    }

    /// Multi-head causal self-attention over per-sample blocks of `seq`
    /// rows. Queries attend to earlier active keys and always to
    /// themselves; scores are scaled by `1/√head_dim`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, meta: AttentionMeta) -> Result<NodeId> {
        let (rows, d) = self.value(q).dims2()?;
        if self.value(k).shape() != [rows, d] || self.value(v).shape() != [rows, d] {
            return Err(Error::Dim("causal_attention: q/k/v shapes differ".into()));
        }
        if rows != meta.batch * meta.seq {
            return Err(Error::Dim(format!(
                "causal_attention: {rows} rows != batch {} × seq {}",
                meta.batch, meta.seq
            )));
        }
        if d % meta.heads != 0 {
            return Err(Error::Dim(format!(
                "causal_attention: width {d} not divisible by {} heads",
                meta.heads
            )));
        }
        if meta.key_active.len() != rows {
            return Err(Error::Dim("causal_attention: key_active length mismatch".into()));
        }
        let (b, s, h) = (meta.batch, meta.seq, meta.heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; b * h * s * s];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let key_active = &meta.key_active;
            par::for_each_two_chunks_mut(&mut out, s * d, &mut probs, h * s * s, |bi, ob, pb| {
                for hi in 0..h {
                    let col = hi * dh;
                    for i in 0..s {
                        let qrow = &qd[(bi * s + i) * d + col..(bi * s + i) * d + col + dh];
                        let prow = &mut pb[hi * s * s + i * s..hi * s * s + i * s + s];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..=i {
                            if j != i && !key_active[bi * s + j] {
                                prow[j] = f64::NEG_INFINITY;
                                continue;
                            }
                            let krow = &kd[(bi * s + j) * d + col..(bi * s + j) * d + col + dh];
                            let mut acc = 0.0;
                            for (a, b) in qrow.iter().zip(krow) {
                                acc += a * b;
                            }
                            let sc = acc * scale;
                            prow[j] = sc;
                            if sc > max {
                                max = sc;
                            }
                        }
                        let mut z = 0.0;
                        for p in prow.iter_mut().take(i + 1) {
                            if p.is_finite() {
                                *p = (*p - max).exp();
                                z += *p;
                            } else {
                                *p = 0.0;
                            }
                        }
                        for p in prow.iter_mut().take(i + 1) {
                            *p /= z;
                        }
                        let orow = &mut ob[i * d + col..i * d + col + dh];
                        for j in 0..=i {
                            let pij = prow[j];
                            if pij == 0.0 {
                                continue;
                            }
                            let vrow = &vd[(bi * s + j) * d + col..(bi * s + j) * d + col + dh];
                            for (o, &vv) in orow.iter_mut().zip(vrow) {
                                *o += pij * vv;
                            }
                        }
                    }
                }
            });
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::CausalAttention { q, k, v, meta, probs },
            needs,
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (r, d) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &ri in &rows {
            if ri >= r {
                return Err(Error::Dim(format!("gather_rows: row {ri} out of {r}")));
            }
            out.extend_from_slice(&xd[ri * d..(ri + 1) * d]);
        }
        let n = rows.len();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::GatherRows { x, rows }, needs))
    }

    pub fn interleave(&mut self, parts: Vec<NodeId>, src: Vec<(u32, u32)>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("interleave: no parts".into()));
        }
        let d = self.value(parts[0]).dims2()?.1;
        for &p in &parts {
            if self.value(p).dims2()?.1 != d {
                return Err(Error::Dim("interleave: parts have different widths".into()));
            }
        }
        let mut out = Vec::with_capacity(src.len() * d);
        for &(pi, ri) in &src {
            let part = self.value(parts[pi as usize]);
            let (pr, _) = part.dims2()?;
            let ri = ri as usize;
            if ri >= pr {
                return Err(Error::Dim(format!("interleave: row {ri} out of {pr}")));
            }
            out.extend_from_slice(&part.data()[ri * d..(ri + 1) * d]);
        }
        let n = src.len();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::Interleave { parts, src }, needs))
    }

    /// `Σ|x − target|` (or the mean when `mean` is set) against a constant.
    pub fn l1_dist_const(&mut self, x: NodeId, target: Tensor, mean: bool) -> Result<NodeId> {
        if self.value(x).shape() != target.shape() {
            return Err(Error::Dim(format!(
                "l1_dist_const: shapes differ: {:?} vs {:?}",
                self.value(x).shape(),
                target.shape()
            )));
        }
        let mut total = 0.0;
        for (a, b) in self.value(x).data().iter().zip(target.data()) {
            total += (a - b).abs();
        }
        if mean {
            total /= target.len() as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::L1DistConst { x, target, mean }, needs))
    }

    /// Weighted mean over rows of the negative log-probability of the gold
    /// class. Rows with weight 0 contribute nothing; the total weight must
    /// be positive.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        gold: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<NodeId> {
        let (r, vocab) = self.value(logits).dims2()?;
        if gold.len() != r || weights.len() != r {
            return Err(Error::Dim(format!(
                "masked_cross_entropy: {r} rows but {} gold / {} weights",
                gold.len(),
                weights.len()
            )));
        }
        for &g in &gold {
            if g >= vocab {
                return Err(Error::Dim(format!("masked_cross_entropy: gold id {g} ≥ vocab {vocab}")));
            }
        }
        let weight_sum: f64 = weights.iter().sum();
        if weight_sum <= 0.0 {
            return Err(Error::Contract(
                "masked_cross_entropy: all answer positions are padded".into(),
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        par::for_each_row_mut(&mut probs, vocab, |_, row| {
            crate::tensor::softmax_in_place(row);
        });
        let mut total = 0.0;
        for i in 0..r {
            if weights[i] > 0.0 {
                total += weights[i] * -(probs[i * vocab + gold[i]].ln());
            }
        }
        total /= weight_sum;
        let probs = Tensor::new(vec![r, vocab], probs)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedCrossEntropy { logits, gold, weights, weight_sum, probs },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss node. Consumes the tape logically:
    /// a second call is a usage error.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientVector> {
        if self.spent {
            return Err(Error::Usage("backward called twice on one tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss node is not on this tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.spent = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf { .. }) {
                continue; // keep leaf grads for collection
            }
            let g = grads[id].take().expect("checked above");
            self.propagate(id, &g, &mut grads)?;
        }

        let mut entries = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name), trainable: true } = &node.op {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                entries.insert(name.clone(), g);
            }
        }
        Ok(GradientVector::from_map(entries))
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let accum = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| {
            match &mut grads[target.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &nodes[id].op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                if self.needs(*a) {
                    accum(grads, *a, matmul_a_bt(g, &nodes[b.0].value)?);
                }
                if self.needs(*b) {
                    accum(grads, *b, matmul_at_b(&nodes[a.0].value, g)?);
                }
            }
            Op::AddRowBroadcast { x, bias } => {
                if self.needs(*x) {
                    accum(grads, *x, g.clone());
                }
                if self.needs(*bias) {
                    let (r, d) = g.dims2()?;
                    let mut db = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            db[j] += g.data()[i * d + j];
                        }
                    }
                    accum(grads, *bias, Tensor::new(vec![d], db)?);
                }
            }
            Op::Add { x, y } => {
                if self.needs(*x) {
                    accum(grads, *x, g.clone());
                }
                if self.needs(*y) {
                    accum(grads, *y, g.clone());
                }
            }
            Op::Mul { x, y } => {
                if self.needs(*x) {
                    accum(grads, *x, tensor::mul(g, &nodes[y.0].value)?);
                }
                if self.needs(*y) {
                    accum(grads, *y, tensor::mul(g, &nodes[x.0].value)?);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    accum(grads, *x, tensor::scale(g, *factor));
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let gv = g.item()?;
                    accum(grads, *x, Tensor::full(nodes[x.0].value.shape(), gv));
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let mut dx = g.data().to_vec();
                    let xd = nodes[x.0].value.data();
                    for (d, &xv) in dx.iter_mut().zip(xd) {
                        *d *= gelu_bwd(xv);
                    }
                    accum(grads, *x, Tensor::new(nodes[x.0].value.shape().to_vec(), dx)?);
                }
            }
            Op::LayerNorm { x, gain, bias, normalized, inv_std } => {
                let (r, d) = normalized.dims2()?;
                let gd = nodes[gain.0].value.data();
                if self.needs(*gain) {
                    let mut dgain = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dgain[j] += g.data()[i * d + j] * normalized.data()[i * d + j];
                        }
                    }
                    accum(grads, *gain, Tensor::new(vec![d], dgain)?);
                }
                if self.needs(*bias) {
                    let mut dbias = vec![0.0; d];
                    for i in 0..r {
                        for j in 0..d {
                            dbias[j] += g.data()[i * d + j];
                        }
                    }
                    accum(grads, *bias, Tensor::new(vec![d], dbias)?);
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; r * d];
                    let gdata = g.data();
                    let ndata = normalized.data();
                    par::for_each_row_mut(&mut dx, d, |i, row| {
                        let grow = &gdata[i * d..(i + 1) * d];
                        let nrow = &ndata[i * d..(i + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dxhat = grow[j] * gd[j];
                            m1 += dxhat;
                            m2 += dxhat * nrow[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dxhat = grow[j] * gd[j];
                            row[j] = inv_std[i] * (dxhat - m1 - nrow[j] * m2);
                        }
                    });
                    accum(grads, *x, Tensor::new(vec![r, d], dx)?);
                }
            }
            Op::CausalAttention { q, k, v, meta, probs } => {
                let (dq, dk, dv) = attention_backward(
                    g,
                    &nodes[q.0].value,
                    &nodes[k.0].value,
                    &nodes[v.0].value,
                    meta,
                    probs,
                )?;
                if self.needs(*q) {
                    accum(grads, *q, dq);
                }
                if self.needs(*k) {
                    accum(grads, *k, dk);
                }
                if self.needs(*v) {
                    accum(grads, *v, dv);
                }
            }
            Op::GatherRows { x, rows } => {
                if self.needs(*x) {
                    let (_, d) = nodes[x.0].value.dims2()?;
                    let mut dx = Tensor::zeros(nodes[x.0].value.shape());
                    for (i, &ri) in rows.iter().enumerate() {
                        let grow = &g.data()[i * d..(i + 1) * d];
                        let target = &mut dx.data_mut()[ri * d..(ri + 1) * d];
                        for (t, &gv) in target.iter_mut().zip(grow) {
                            *t += gv;
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::Interleave { parts, src } => {
                let d = nodes[parts[0].0].value.dims2()?.1;
                let mut dparts: Vec<Option<Tensor>> = parts
                    .iter()
                    .map(|p| {
                        if self.needs(*p) {
                            Some(Tensor::zeros(nodes[p.0].value.shape()))
                        } else {
                            None
                        }
                    })
                    .collect();
                for (i, &(pi, ri)) in src.iter().enumerate() {
                    if let Some(dp) = &mut dparts[pi as usize] {
                        let grow = &g.data()[i * d..(i + 1) * d];
                        let ri = ri as usize;
                        let target = &mut dp.data_mut()[ri * d..(ri + 1) * d];
                        for (t, &gv) in target.iter_mut().zip(grow) {
                            *t += gv;
                        }
                    }
                }
                for (p, dp) in parts.iter().zip(dparts) {
                    if let Some(dp) = dp {
                        accum(grads, *p, dp);
                    }
                }
            }
            Op::L1DistConst { x, target, mean } => {
                if self.needs(*x) {
                    let gs = g.item()?;
                    let factor = if *mean { gs / target.len() as f64 } else { gs };
                    let xd = nodes[x.0].value.data();
                    let data: Vec<f64> = xd
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| factor * tensor::sign_scalar(a - b))
                        .collect();
                    accum(grads, *x, Tensor::new(target.shape().to_vec(), data)?);
                }
            }
            Op::MaskedCrossEntropy { logits, gold, weights, weight_sum, probs } => {
                if self.needs(*logits) {
                    let gs = g.item()?;
                    let (r, vocab) = probs.dims2()?;
                    let mut dl = vec![0.0; r * vocab];
                    let pd = probs.data();
                    par::for_each_row_mut(&mut dl, vocab, |i, row| {
                        let w = weights[i];
                        if w == 0.0 {
                            return;
                        }
                        let f = gs * w / weight_sum;
                        let prow = &pd[i * vocab..(i + 1) * vocab];
                        for j in 0..vocab {
                            row[j] = f * prow[j];
                        }
                        row[gold[i]] -= f;
                    });
                    accum(grads, *logits, Tensor::new(vec![r, vocab], dl)?);
                }
            }
        }
        Ok(())
    }
}

/// A scalar loss recorded on its own tape.
pub struct LossNode {
    pub tape: Tape,
    pub node: NodeId,
}

impl LossNode {
    pub fn value(&self) -> f64 {
        self.tape.value(self.node).item().expect("loss node is scalar")
    }

    pub fn backward(mut self) -> Result<GradientVector> {
        self.tape.backward(self.node)
    }
}

const GELU_C: f64 = 0.044715;

#[inline]
fn gelu_fwd(x: f64) -> f64 {
    let u = (2.0 / std::f64::consts::PI).sqrt() * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_C * x * x)
}

#[allow(clippy::type_complexity)]
fn attention_backward(
    g: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    meta: &AttentionMeta,
    probs: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, d) = q.dims2()?;
    let (s, h) = (meta.seq, meta.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    let qd = q.data();
    let kd = k.data();
    let vd = v.data();
    let gd = g.data();
    par::for_each_three_chunks_mut(&mut dq, &mut dk, &mut dv, s * d, |bi, dqb, dkb, dvb| {
        let mut dscores = vec![0.0; s];
        for hi in 0..h {
            let col = hi * dh;
            let pb = &probs[bi * h * s * s + hi * s * s..bi * h * s * s + (hi + 1) * s * s];
            for i in 0..s {
                let grow = &gd[(bi * s + i) * d + col..(bi * s + i) * d + col + dh];
                let prow = &pb[i * s..i * s + s];
                // dv_j += p_ij · g_i  and  dp_ij = g_i · v_j
                let mut dot_dp_p = 0.0;
                for j in 0..=i {
                    let pij = prow[j];
                    if pij == 0.0 {
                        dscores[j] = 0.0;
                        continue;
                    }
                    let vrow = &vd[(bi * s + j) * d + col..(bi * s + j) * d + col + dh];
                    let mut dp = 0.0;
                    for (gq, vv) in grow.iter().zip(vrow) {
                        dp += gq * vv;
                    }
                    let dvrow = &mut dvb[j * d + col..j * d + col + dh];
                    for (o, &gq) in dvrow.iter_mut().zip(grow) {
                        *o += pij * gq;
                    }
                    dscores[j] = dp;
                    dot_dp_p += dp * pij;
                }
                // softmax backward: ds_ij = p_ij (dp_ij − Σ dp·p)
                for j in 0..=i {
                    dscores[j] = prow[j] * (dscores[j] - dot_dp_p);
                }
                // dq_i += Σ_j ds_ij·k_j·scale ; dk_j += ds_ij·q_i·scale
                let qrow = &qd[(bi * s + i) * d + col..(bi * s + i) * d + col + dh];
                let dqrow = &mut dqb[i * d + col..i * d + col + dh];
                for j in 0..=i {
                    let dsij = dscores[j] * scale;
                    if dsij == 0.0 {
                        continue;
                    }
                    let krow = &kd[(bi * s + j) * d + col..(bi * s + j) * d + col + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += dsij * kv;
                    }
                    let dkrow = &mut dkb[j * d + col..j * d + col + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += dsij * qv;
                    }
                }
            }
        }
    });
    Ok((
        Tensor::new(vec![rows, d], dq)?,
        Tensor::new(vec![rows, d], dk)?,
        Tensor::new(vec![rows, d], dv)?,
    ))
}

#[cfg(test)]
mod tests;
