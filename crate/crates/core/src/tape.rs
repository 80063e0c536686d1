//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the inputs it
//! read. [`Tape::backward`] walks the nodes once in reverse recording order and
//! accumulates gradients additively, so a node consumed twice receives the sum
//! of both branch gradients.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;


use crate::ops::{self, PROB_FLOOR};
use crate::{bail, Error, NodeId, Result, Scalar, Tensor};

/// Pooling over the rows of each sequence in a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum PoolMode {
    Average,
    Max,
    Cls,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulConst(NodeId, Vec<F>),
    Scale(NodeId, F),
    Gelu(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        probs: Vec<F>,
    },
    Softmax {
        x: NodeId,
        t: F,
    },
    CrossEntropy {
        pred: NodeId,
        target: Vec<F>,
    },
    Mse {
        a: NodeId,
        b: NodeId,
        rows: Option<Vec<bool>>,
        count: usize,
    },
    Sum(NodeId),
    Mean(NodeId),
    AttnPool {
        h: NodeId,
        scores: NodeId,
        seq: usize,
        alpha: Vec<F>,
    },
    WeightPool {
        h: NodeId,
        seq: usize,
        weights: Vec<F>,
    },
    MaxPool {
        h: NodeId,
        argmax: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recorded computation plus, after [`Tape::backward`], gradients of leaves.
#[derive(Debug, Clone, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn cols_of(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[NodeId]) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a copy of `t` as a leaf. Trainable when `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.values().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `t` as a leaf and remembers the node on the tensor.
    pub fn bind(&mut self, t: &mut Tensor<F>) -> NodeId {
        let id = self.leaf(t);
        t.node = Some(id);
        id
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<F>) -> Result<NodeId> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, id: NodeId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor<F> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node shape")
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.value(id)[0]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k, n) = ops::matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![F::zero(); m * n];
        ops::matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Result<Vec<F>> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of `a`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = cols_of(self.shape(a));
        if self.value(bias).len() != n {
            return Err(dim_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut v = self.value(a).to_vec();
        for row in v.chunks_exact_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), v, Op::AddBias(a, bias), &[a, bias]))
    }

    /// Elementwise product with a constant (dropout masks, per-row weights).
    pub fn mul_const(&mut self, a: NodeId, c: Vec<F>) -> Result<NodeId> {
        if c.len() != self.value(a).len() {
            return Err(dim_err("mul_const", self.shape(a), &[c.len()]));
        }
        let v = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::MulConst(a, c), &[a]))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| ops::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), v, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| x.max(F::zero())).collect();
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(self.shape(a).to_vec(), v, Op::Tanh(a), &[a])
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(dim_err("gather", shape, &[ids.len()]));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            bail!(Input, "row id {bad} out of range for table with {rows} rows");
        }
        let tv = self.value(table);
        let mut v = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            v.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let n = ids.len();
        Ok(self.push(vec![n, d], v, Op::Gather { table, ids }, &[table]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = cols_of(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (out, xhat, rstd) = ops::layer_norm_rows(self.value(x), self.value(gain), self.value(bias), d);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product self-attention over `batch` sequences of
    /// `seq` rows each. `key_mask[b·seq + j]` false excludes key `j` (its
    /// pre-softmax score is −∞, so it receives exactly zero weight).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        key_mask: &[bool],
    ) -> Result<NodeId> {
        let shape = self.shape(q).to_vec();
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(dim_err("attention", &shape, self.shape(k)));
        }
        let (n, d) = (shape[0], shape[1]);
        if heads == 0 || d % heads != 0 || seq == 0 || n % seq != 0 || key_mask.len() != n {
            return Err(dim_err("attention", &shape, &[heads, seq, key_mask.len()]));
        }
        let batch = n / seq;
        let dh = d / heads;
        let scale = F::of(1.0 / Float::sqrt(dh as f64));
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![F::zero(); batch * heads * seq * seq];
        let mut out = vec![F::zero(); n * d];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            if !mask.iter().any(|&m| m) {
                bail!(Input, "sequence {b} has no unmasked positions");
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * d + off..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut max = F::neg_infinity();
                    for j in 0..seq {
                        if mask[j] {
                            let kj = &kv[(b * seq + j) * d + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<F>() * scale;
                            p[j] = s;
                            max = max.max(s);
                        }
                    }
                    let mut sum = F::zero();
                    for j in 0..seq {
                        p[j] = if mask[j] { (p[j] - max).exp() } else { F::zero() };
                        sum = sum + p[j];
                    }
                    let o = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..seq {
                        p[j] = p[j] / sum;
                        if p[j] != F::zero() {
                            let vj = &vv[(b * seq + j) * d + off..][..dh];
                            for (ov, &x) in o.iter_mut().zip(vj) {
                                *ov = *ov + p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention probabilities recorded by an [`Tape::attention`] node, laid
    /// out as `[batch][head][query][key]`.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[F]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row-wise `softmax(x / t)`.
    pub fn softmax_rows(&mut self, x: NodeId, t: F) -> Result<NodeId> {
        ops::check_temperature(t)?;
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows"));
        }
        let cols = cols_of(self.shape(x));
        let mut out = vec![F::zero(); self.value(x).len()];
        ops::softmax_rows_into(self.value(x), &mut out, cols, t);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, t }, &[x]))
    }

    /// Per-row cross entropy `−Σ_c target[r,c]·ln(pred[r,c])` against a
    /// constant target; returns a `[rows]` vector.
    pub fn cross_entropy_rows(&mut self, pred: NodeId, target: Vec<F>) -> Result<NodeId> {
        if target.len() != self.value(pred).len() {
            return Err(dim_err("cross_entropy", &[target.len()], self.shape(pred)));
        }
        let rows = self.shape(pred)[0];
        let cols = cols_of(self.shape(pred));
        let v = self
            .value(pred)
            .chunks_exact(cols)
            .zip(target.chunks_exact(cols))
            .map(|(p, t)| ops::cross_entropy_unchecked(t, p))
            .collect();
        Ok(self.push(vec![rows], v, Op::CrossEntropy { pred, target }, &[pred]))
    }

    /// Mean squared error over all elements, or over the rows whose flag in
    /// `rows` is set.
    pub fn mse(&mut self, a: NodeId, b: NodeId, rows: Option<Vec<bool>>) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err("mse", self.shape(a), self.shape(b)));
        }
        let cols = cols_of(self.shape(a));
        let n_rows = self.shape(a)[0];
        if let Some(r) = &rows {
            if r.len() != n_rows {
                return Err(dim_err("mse", self.shape(a), &[r.len()]));
            }
        }
        let keep = |r: usize| rows.as_ref().is_none_or(|m| m[r]);
        let kept = (0..n_rows).filter(|&r| keep(r)).count();
        if kept == 0 {
            return Err(Error::Contract("mse over zero unmasked rows".to_string()));
        }
        let count = kept * cols;
        let (av, bv) = (self.value(a), self.value(b));
        let mut sum = F::zero();
        for r in (0..n_rows).filter(|&r| keep(r)) {
            for c in r * cols..(r + 1) * cols {
                let diff = av[c] - bv[c];
                sum = sum + diff * diff;
            }
        }
        let v = vec![sum / F::of(count as f64)];
        Ok(self.push(vec![1], v, Op::Mse { a, b, rows, count }, &[a, b]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = F::of(self.value(x).len() as f64);
        let s = self.value(x).iter().copied().sum::<F>() / n;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Attention-weighted sum of each sequence's rows: `α = softmax(scores)`
    /// over unmasked rows, output `Σ α_i h_i`. Returns `[batch, d]`.
    pub fn attn_pool(&mut self, h: NodeId, scores: NodeId, seq: usize, mask: &[bool]) -> Result<NodeId> {
        let (n, d) = (self.shape(h)[0], cols_of(self.shape(h)));
        if self.value(scores).len() != n || mask.len() != n || seq == 0 || n % seq != 0 {
            return Err(dim_err("attn_pool", self.shape(h), self.shape(scores)));
        }
        let batch = n / seq;
        let sv = self.value(scores);
        let mut alpha = vec![F::zero(); n];
        for b in 0..batch {
            let range = b * seq..(b + 1) * seq;
            if !mask[range.clone()].iter().any(|&m| m) {
                bail!(Input, "sequence {b} is fully masked; nothing to pool");
            }
            let max = range
                .clone()
                .filter(|&i| mask[i])
                .map(|i| sv[i])
                .fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for i in range.clone() {
                if mask[i] {
                    alpha[i] = (sv[i] - max).exp();
                    sum = sum + alpha[i];
                }
            }
            for i in range {
                alpha[i] = alpha[i] / sum;
            }
        }
        let out = weighted_rows(self.value(h), &alpha, seq, d);
        Ok(self.push(
            vec![batch, d],
            out,
            Op::AttnPool {
                h,
                scores,
                seq,
                alpha,
            },
            &[h, scores],
        ))
    }

    /// Attention weights recorded by an [`Tape::attn_pool`] node.
    pub fn pool_weights(&self, id: NodeId) -> Option<&[F]> {
        match &self.nodes[id.0].op {
            Op::AttnPool { alpha, .. } => Some(alpha),
            Op::WeightPool { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Parameter-free pooling baselines over unmasked rows.
    pub fn pool(&mut self, h: NodeId, seq: usize, mask: &[bool], mode: PoolMode) -> Result<NodeId> {
        let (n, d) = (self.shape(h)[0], cols_of(self.shape(h)));
        if mask.len() != n || seq == 0 || n % seq != 0 {
            return Err(dim_err("pool", self.shape(h), &[mask.len()]));
        }
        let batch = n / seq;
        for b in 0..batch {
            if !mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                bail!(Input, "sequence {b} is fully masked; nothing to pool");
            }
        }
        match mode {
            PoolMode::Average | PoolMode::Cls => {
                let mut weights = vec![F::zero(); n];
                for b in 0..batch {
                    let range = b * seq..(b + 1) * seq;
                    if mode == PoolMode::Cls {
                        if !mask[b * seq] {
                            bail!(Input, "sequence {b} has a masked first position");
                        }
                        weights[b * seq] = F::one();
                    } else {
                        let cnt = F::of(mask[range.clone()].iter().filter(|&&m| m).count() as f64);
                        for i in range.filter(|&i| mask[i]) {
                            weights[i] = F::one() / cnt;
                        }
                    }
                }
                let out = weighted_rows(self.value(h), &weights, seq, d);
                Ok(self.push(vec![batch, d], out, Op::WeightPool { h, seq, weights }, &[h]))
            }
            PoolMode::Max => {
                let hv = self.value(h);
                let mut argmax = vec![0usize; batch * d];
                let mut out = vec![F::zero(); batch * d];
                for b in 0..batch {
                    for c in 0..d {
                        let mut best = None::<usize>;
                        for i in (b * seq..(b + 1) * seq).filter(|&i| mask[i]) {
                            if best.is_none_or(|j| hv[i * d + c] > hv[j * d + c]) {
                                best = Some(i);
                            }
                        }
                        let i = best.expect("non-empty");
                        argmax[b * d + c] = i;
                        out[b * d + c] = hv[i * d + c];
                    }
                }
                Ok(self.push(vec![batch, d], out, Op::MaxPool { h, argmax }, &[h]))
            }
        }
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `t.node` into `t`'s gradient slot.
    pub fn collect_grad(&self, t: &mut Tensor<F>) {
        if let Some(g) = t.node.and_then(|id| self.grad(id)) {
            t.accumulate_grad(g);
        }
    }

    /// Backpropagates from a scalar `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.nodes[loss.0].shape);
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            // Interior gradients are not kept.
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        // Accumulates into the gradient of `id` when it is trainable.
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [F])| {
            if nodes[id.0].requires_grad {
                let len = nodes[id.0].value.len();
                let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); len]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                // dA = dC · Bᵀ, dB = Aᵀ · dC
                acc(*a, &mut |ga| ops::gemm_acc(g, &ops::transpose(bv, k, n), ga, m, n, k));
                acc(*b, &mut |gb| ops::gemm_acc(&ops::transpose(av, m, k), g, gb, k, m, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*bias, &mut |gb| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &y) in gb.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * y;
                    }
                });
            }
            Op::MulConst(a, c) => acc(*a, &mut |ga| {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(c) {
                    *x = *x + gy * y;
                }
            }),
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (x, &gy) in ga.iter_mut().zip(g) {
                    *x = *x + gy * *s;
                }
            }),
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * ops::gelu_grad(v);
                    }
                });
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > F::zero() {
                            *x = *x + gy;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                acc(*a, &mut |ga| {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x = *x + gy * (F::one() - y * y);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = &nodes[gain.0].value;
                acc(*gain, &mut |gg| {
                    for (row_g, row_h) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] = gg[c] + row_g[c] * row_h[c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for row_g in g.chunks_exact(d) {
                        add_into(gb, row_g);
                    }
                });
                acc(*x, &mut |gx| {
                    let inv_d = F::of(1.0 / d as f64);
                    for (r, (row_g, row_h)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut mean_dh = F::zero();
                        let mut mean_dhh = F::zero();
                        for c in 0..d {
                            let dh = row_g[c] * gv[c];
                            mean_dh = mean_dh + dh;
                            mean_dhh = mean_dhh + dh * row_h[c];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dhh = mean_dhh * inv_d;
                        for c in 0..d {
                            let dh = row_g[c] * gv[c];
                            let v = rstd[r] * (dh - mean_dh - row_h[c] * mean_dhh);
                            gx[r * d + c] = gx[r * d + c] + v;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => attention_backward(nodes, grads, g, (*q, *k, *v), *heads, *seq, probs),
            Op::Softmax { x, t } => {
                let y = &node.value;
                let cols = cols_of(&node.shape);
                acc(*x, &mut |gx| {
                    for ((gr, yr), xr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            xr[c] = xr[c] + yr[c] * (gr[c] - dot) / *t;
                        }
                    }
                });
            }
            Op::CrossEntropy { pred, target } => {
                let pv = &nodes[pred.0].value;
                let cols = cols_of(&nodes[pred.0].shape);
                let floor = F::of(PROB_FLOOR);
                acc(*pred, &mut |gp| {
                    for (i, x) in gp.iter_mut().enumerate() {
                        let (t, p) = (target[i], pv[i]);
                        if t != F::zero() && p > floor {
                            *x = *x - g[i / cols] * t / p;
                        }
                    }
                });
            }
            Op::Mse { a, b, rows, count } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let cols = cols_of(&nodes[a.0].shape);
                let s = g[0] * F::of(2.0 / *count as f64);
                let keep = |i: usize| rows.as_ref().is_none_or(|m| m[i / cols]);
                acc(*a, &mut |ga| {
                    for i in (0..ga.len()).filter(|&i| keep(i)) {
                        ga[i] = ga[i] + s * (av[i] - bv[i]);
                    }
                });
                acc(*b, &mut |gb| {
                    for i in (0..gb.len()).filter(|&i| keep(i)) {
                        gb[i] = gb[i] - s * (av[i] - bv[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }),
            Op::Mean(x) => {
                let s = g[0] / F::of(nodes[x.0].value.len() as f64);
                acc(*x, &mut |gx| {
                    for v in gx.iter_mut() {
                        *v = *v + s;
                    }
                });
            }
            Op::AttnPool { h, scores, seq, alpha } => {
                let hv = &nodes[h.0].value;
                let d = cols_of(&nodes[h.0].shape);
                acc(*h, &mut |gh| {
                    for (i, &a) in alpha.iter().enumerate() {
                        if a != F::zero() {
                            let gb = &g[(i / seq) * d..][..d];
                            for (x, &y) in gh[i * d..(i + 1) * d].iter_mut().zip(gb) {
                                *x = *x + a * y;
                            }
                        }
                    }
                });
                acc(*scores, &mut |gs| {
                    for b in 0..alpha.len() / seq {
                        let gb = &g[b * d..(b + 1) * d];
                        let range = b * seq..(b + 1) * seq;
                        let dalpha: Vec<F> = range
                            .clone()
                            .map(|i| hv[i * d..(i + 1) * d].iter().zip(gb).map(|(&x, &y)| x * y).sum())
                            .collect();
                        let dot: F = range.clone().zip(&dalpha).map(|(i, &da)| alpha[i] * da).sum();
                        for (i, &da) in range.zip(&dalpha) {
                            gs[i] = gs[i] + alpha[i] * (da - dot);
                        }
                    }
                });
            }
            Op::WeightPool { h, seq, weights } => {
                let d = cols_of(&nodes[h.0].shape);
                acc(*h, &mut |gh| {
                    for (i, &w) in weights.iter().enumerate() {
                        if w != F::zero() {
                            let gb = &g[(i / seq) * d..][..d];
                            for (x, &y) in gh[i * d..(i + 1) * d].iter_mut().zip(gb) {
                                *x = *x + w * y;
                            }
                        }
                    }
                });
            }
            Op::MaxPool { h, argmax } => {
                let d = cols_of(&nodes[h.0].shape);
                acc(*h, &mut |gh| {
                    for (o, &i) in argmax.iter().enumerate() {
                        let c = o % d;
                        gh[i * d + c] = gh[i * d + c] + g[o];
                    }
                });
            }
        }
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (x, &y) in dst.iter_mut().zip(src) {
        *x = *x + y;
    }
}

fn weighted_rows<F: Scalar>(h: &[F], weights: &[F], seq: usize, d: usize) -> Vec<F> {
    let batch = weights.len() / seq;
    let mut out = vec![F::zero(); batch * d];
    for (i, &w) in weights.iter().enumerate() {
        if w != F::zero() {
            let o = &mut out[(i / seq) * d..][..d];
            for (x, &y) in o.iter_mut().zip(&h[i * d..(i + 1) * d]) {
                *x = *x + w * y;
            }
        }
    }
    out
}

fn attention_backward<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    g: &[F],
    (q, k, v): (NodeId, NodeId, NodeId),
    heads: usize,
    seq: usize,
    probs: &[F],
) {
    let (n, d) = (nodes[q.0].shape[0], nodes[q.0].shape[1]);
    let batch = n / seq;
    let dh = d / heads;
    let scale = F::of(1.0 / Float::sqrt(dh as f64));
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let mut gq = vec![F::zero(); n * d];
    let mut gk = vec![F::zero(); n * d];
    let mut gv = vec![F::zero(); n * d];
    let mut dp = vec![F::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq {
                let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let go = &g[(b * seq + i) * d + off..][..dh];
                let mut dot = F::zero();
                for j in 0..seq {
                    if p[j] == F::zero() {
                        dp[j] = F::zero();
                        continue;
                    }
                    let row = (b * seq + j) * d + off;
                    let vj = &vv[row..row + dh];
                    dp[j] = go.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                    dot = dot + p[j] * dp[j];
                    for (x, &y) in gv[row..row + dh].iter_mut().zip(go) {
                        *x = *x + p[j] * y;
                    }
                }
                let qrow = (b * seq + i) * d + off;
                for j in 0..seq {
                    if p[j] == F::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let krow = (b * seq + j) * d + off;
                    for c in 0..dh {
                        gq[qrow + c] = gq[qrow + c] + ds * kv[krow + c];
                        gk[krow + c] = gk[krow + c] + ds * qv[qrow + c];
                    }
                }
            }
        }
    }
    for (id, local) in [(q, gq), (k, gk), (v, gv)] {
        if nodes[id.0].requires_grad {
            let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); n * d]);
            add_into(slot, &local);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let mut x = Tensor::from_fn(&[2, 3], |i| i as f64).param();
        let xi = tape.bind(&mut x);
        let s = tape.sum(xi);
        tape.backward(s).unwrap();
        tape.collect_grad(&mut x);
        assert_eq!(x.grad().unwrap(), &[1.0; 6]);
    }

    #[test]
    fn mse_against_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![1], vec![2.0]).unwrap().param());
        let z = tape.constant(vec![1], vec![0.0]).unwrap();
        let l = tape.mse(x, z, None).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert!(tape.grad(z).is_none());
    }

    #[test]
    fn shared_input_accumulates_both_branches() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.5, -2.0]).unwrap().param());
        let a = tape.scale(x, 3.0);
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        // d/dx (3x + x²) = 3 + 2x
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(&[2]).param());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&Tensor::<f64>::filled(&[2, 2], 0.5).param());
        let c = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = tape.matmul(c, w).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(w).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn single_key_attention_puts_all_weight_on_it() {
        let mut tape = Tape::<f64>::new();
        let mut rng = crate::Rng::seed(2);
        let x = tape.leaf(&Tensor::randn(&[4, 4], 1.0, &mut rng));
        let mask = [false, false, true, false];
        let a = tape.attention(x, x, x, 2, 4, &mask).unwrap();
        let probs = tape.attention_probs(a).unwrap();
        for row in probs.chunks(4) {
            assert_eq!(row, &[0.0, 0.0, 1.0, 0.0]);
        }
        for r in 0..4 {
            assert_eq!(&tape.value(a)[r * 4..r * 4 + 4], &tape.value(x)[8..12]);
        }
    }

    #[test]
    fn pool_baselines() {
        let mut tape = Tape::<f64>::new();
        let h = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mask = [true, true];
        let avg = tape.pool(h, 2, &mask, PoolMode::Average).unwrap();
        let max = tape.pool(h, 2, &mask, PoolMode::Max).unwrap();
        let cls = tape.pool(h, 2, &mask, PoolMode::Cls).unwrap();
        assert_eq!(tape.value(avg), &[0.5, 0.5]);
        assert_eq!(tape.value(max), &[1.0, 1.0]);
        assert_eq!(tape.value(cls), &[1.0, 0.0]);
        assert!(tape.pool(h, 2, &[false, false], PoolMode::Average).is_err());
    }
}
